//! Architecture mini-language and source-graph builders.
//!
//! `mlp:784-100-10` is a ReLU perceptron with the given layer widths;
//! `lenet-small` is conv 6@5×5, pool, conv 16@5×5, pool, fully connected 10 on
//! 28×28×1 inputs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{CompGraph, ConvGeom, GraphError, OpKind, PoolGeom, Stage};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    Mlp(Vec<usize>),
    LenetSmall,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("unknown architecture {0:?} (expected mlp:<w0>-<w1>-... or lenet-small)")]
    Unknown(String),
    #[error("mlp needs at least two positive widths, got {0:?}")]
    Widths(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let s = s.trim();
        if s == "lenet-small" {
            return Ok(Arch::LenetSmall);
        }
        let Some(rest) = s.strip_prefix("mlp:") else {
            return Err(ModelError::Unknown(s.into()));
        };
        let widths: Option<Vec<usize>> = rest.split('-').map(|w| w.parse().ok().filter(|&n| n > 0)).collect();
        match widths {
            Some(w) if w.len() >= 2 => Ok(Arch::Mlp(w)),
            _ => Err(ModelError::Widths(rest.into())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Arch::Mlp(w) => {
                let parts: Vec<String> = w.iter().map(|n| alloc::format!("{n}")).collect();
                alloc::format!("mlp:{}", parts.join("-"))
            }
            Arch::LenetSmall => "lenet-small".into(),
        }
    }

    /// Input shape expected by the built graph.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Mlp(w) => vec![w[0]],
            Arch::LenetSmall => vec![28, 28, 1],
        }
    }
}

/// Uniform He initialisation, `U(−√(6/fan_in), √(6/fan_in))`.
fn he(rng: &mut ChaCha8Rng, rows: usize, fan_in: usize) -> Tensor {
    let a = math::sqrt(6.0 / fan_in as f64);
    let data = (0..rows * fan_in).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, fan_in], data).expect("init shape")
}

/// Builds the untrained source graph for `arch`.
pub fn build(arch: &Arch, seed: u64) -> Result<CompGraph, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = CompGraph::new(Stage::Source);
    let mut x = g.add(OpKind::Input { shape: arch.input_shape() }, &[])?;
    match arch {
        Arch::Mlp(widths) => {
            for (i, pair) in widths.windows(2).enumerate() {
                let (fan_in, out) = (pair[0], pair[1]);
                x = g.add(OpKind::Dense { weight: he(&mut rng, out, fan_in) }, &[x])?;
                x = g.add(OpKind::BiasAdd { bias: Tensor::zeros(&[out]) }, &[x])?;
                if i + 2 < widths.len() {
                    x = g.add(OpKind::Relu, &[x])?;
                }
            }
        }
        Arch::LenetSmall => {
            let convs = [(28, 1, 6), (12, 6, 16)];
            for (size, in_c, out_c) in convs {
                let geom = ConvGeom {
                    in_h: size,
                    in_w: size,
                    in_c,
                    k_h: 5,
                    k_w: 5,
                    stride: 1,
                    pad: 0,
                    out_c,
                };
                x = g.add(
                    OpKind::Conv2d {
                        geom,
                        weight: he(&mut rng, out_c, geom.kernel_len()),
                    },
                    &[x],
                )?;
                x = g.add(OpKind::BiasAdd { bias: Tensor::zeros(&[out_c]) }, &[x])?;
                x = g.add(OpKind::Relu, &[x])?;
                let pool = PoolGeom {
                    in_h: geom.out_h(),
                    in_w: geom.out_w(),
                    c: out_c,
                    k: 2,
                    stride: 2,
                };
                x = g.add(OpKind::MaxPool { geom: pool }, &[x])?;
            }
            x = g.add(OpKind::Dense { weight: he(&mut rng, 10, 256) }, &[x])?;
            x = g.add(OpKind::BiasAdd { bias: Tensor::zeros(&[10]) }, &[x])?;
        }
    }
    g.set_outputs(&[x])?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_names() {
        assert_eq!(Arch::parse("mlp:784-100-10").unwrap(), Arch::Mlp(vec![784, 100, 10]));
        assert_eq!(Arch::parse("lenet-small").unwrap(), Arch::LenetSmall);
        assert!(Arch::parse("mlp:784").is_err());
        assert!(Arch::parse("mlp:784-0-10").is_err());
        assert!(Arch::parse("resnet").is_err());
        assert_eq!(Arch::parse("mlp:4-3-2").unwrap().name(), "mlp:4-3-2");
    }

    #[test]
    fn builds_validate() {
        let g = build(&Arch::parse("mlp:784-100-10").unwrap(), 1).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.widths().unwrap()[5], 10);
        let l = build(&Arch::LenetSmall, 1).unwrap();
        assert_eq!(*l.widths().unwrap().last().unwrap(), 10);
        assert_eq!(l.widths().unwrap()[8], 256);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Arch::parse("mlp:8-4-2").unwrap();
        assert_eq!(build(&a, 3).unwrap(), build(&a, 3).unwrap());
        assert_ne!(build(&a, 3).unwrap(), build(&a, 4).unwrap());
    }
}
