use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named architecture family, parsed from ids such as `mlp-784-128-128-10` or
/// `resnet-32-w8-c10-i32x32x3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArchSpec {
    /// Fully connected chain; `widths` includes the input and output widths.
    Mlp { widths: Vec<usize> },
    /// CIFAR-style residual network of depth `6n + 2`.
    ResNet {
        depth: usize,
        width: usize,
        classes: usize,
        input: [usize; 3],
    },
}

impl ArchSpec {
    pub fn from_id(id: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("architecture `{id}`: {why}"));
        let mut parts = id.split('-');
        match parts.next() {
            Some("mlp") => {
                let widths = parts
                    .map(|p| p.parse::<usize>().ok().filter(|&w| w > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("widths must be positive integers"))?;
                if widths.len() < 2 {
                    return Err(bad("needs at least an input and an output width"));
                }
                Ok(ArchSpec::Mlp { widths })
            }
            Some("resnet") => {
                let depth: usize = parts
                    .next()
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| bad("missing depth"))?;
                if depth < 8 || !(depth - 2).is_multiple_of(6) {
                    return Err(bad("depth must be 6n+2 with n >= 1"));
                }
                let (mut width, mut classes, mut input) = (16, 10, [32, 32, 3]);
                for opt in parts {
                    let num = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
                    if let Some(v) = opt.strip_prefix('w').and_then(num) {
                        width = v;
                    } else if let Some(v) = opt.strip_prefix('c').and_then(num) {
                        classes = v;
                    } else if let Some(dims) = opt.strip_prefix('i') {
                        let d: Vec<usize> = dims.split('x').filter_map(num).collect();
                        input = d
                            .try_into()
                            .map_err(|_| bad("input must be HxWxC"))?;
                    } else {
                        return Err(bad(&format!("unknown option `{opt}`")));
                    }
                }
                Ok(ArchSpec::ResNet {
                    depth,
                    width,
                    classes,
                    input,
                })
            }
            _ => Err(bad("unknown family (expected mlp or resnet)")),
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ArchSpec::Mlp { widths } => vec![widths[0]],
            ArchSpec::ResNet { input, .. } => input.to_vec(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ArchSpec::Mlp { widths } => *widths.last().unwrap(),
            ArchSpec::ResNet { classes, .. } => *classes,
        }
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchSpec::Mlp { widths } => {
                write!(f, "mlp")?;
                for w in widths {
                    write!(f, "-{w}")?;
                }
                Ok(())
            }
            ArchSpec::ResNet {
                depth,
                width,
                classes,
                input,
            } => {
                write!(f, "resnet-{depth}")?;
                if *width != 16 {
                    write!(f, "-w{width}")?;
                }
                if *classes != 10 {
                    write!(f, "-c{classes}")?;
                }
                if *input != [32, 32, 3] {
                    write!(f, "-i{}x{}x{}", input[0], input[1], input[2])?;
                }
                Ok(())
            }
        }
    }
}

impl Serialize for ArchSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ArchSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ArchSpec::from_id(&s).map_err(serde::de::Error::custom)
    }
}
