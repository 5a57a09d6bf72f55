use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Parameters of one decoder block. Vectors are stored as single-column matrices
/// so every tensor can be visited uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: DMatrix<f64>,
    pub ln1_b: DMatrix<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ln2_g: DMatrix<f64>,
    pub ln2_b: DMatrix<f64>,
    /// d_ff x d_model
    pub w_in: DMatrix<f64>,
    pub b_in: DMatrix<f64>,
    /// d_model x d_ff; the edited matrix. Memory = w_out * key.
    pub w_out: DMatrix<f64>,
    pub b_out: DMatrix<f64>,
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.g", "ln2.b", "mlp.w_in",
    "mlp.b_in", "mlp.w_out", "mlp.b_out",
];

impl BlockParams {
    fn tensors(&self) -> [&DMatrix<f64>; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.wk, &self.wv, &self.wo, &self.ln2_g,
            &self.ln2_b, &self.w_in, &self.b_in, &self.w_out, &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut DMatrix<f64>; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Every tensor of the model. The same container doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// d_model x vocab (one column per token)
    pub embed: DMatrix<f64>,
    /// d_model x max_seq
    pub pos: DMatrix<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: DMatrix<f64>,
    pub lnf_b: DMatrix<f64>,
    /// vocab x d_model
    pub head: DMatrix<f64>,
}

/// A named tensor reference together with the layer it belongs to (if any).
pub struct NamedTensor<'a> {
    pub name: String,
    pub layer: Option<usize>,
    pub tensor: &'a DMatrix<f64>,
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub layer: Option<usize>,
    pub tensor: &'a mut DMatrix<f64>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = DMatrix::<f64>::zeros;
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_g: z(d, 1),
                ln1_b: z(d, 1),
                wq: z(d, d),
                wk: z(d, d),
                wv: z(d, d),
                wo: z(d, d),
                ln2_g: z(d, 1),
                ln2_b: z(d, 1),
                w_in: z(cfg.d_ff, d),
                b_in: z(cfg.d_ff, 1),
                w_out: z(d, cfg.d_ff),
                b_out: z(d, 1),
            })
            .collect();
        Self {
            embed: z(d, cfg.vocab_size),
            pos: z(d, cfg.max_seq),
            blocks,
            lnf_g: z(d, 1),
            lnf_b: z(d, 1),
            head: z(cfg.vocab_size, d),
        }
    }

    /// Seeded initialisation: gains at 1, biases at 0, weights Gaussian with
    /// fan-in scaling; residual projections are shrunk with depth.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::zeros(cfg);
        let mut fill = |m: &mut DMatrix<f64>, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            m.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        let d = cfg.d_model as f64;
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        fill(&mut p.embed, 1.0);
        fill(&mut p.pos, 0.5);
        for b in p.blocks.iter_mut() {
            b.ln1_g.fill(1.0);
            b.ln2_g.fill(1.0);
            fill(&mut b.wq, d.powf(-0.5));
            fill(&mut b.wk, d.powf(-0.5));
            fill(&mut b.wv, d.powf(-0.5));
            fill(&mut b.wo, d.powf(-0.5) * resid);
            fill(&mut b.w_in, d.powf(-0.5));
            fill(&mut b.w_out, (cfg.d_ff as f64).powf(-0.5) * resid);
        }
        p.lnf_g.fill(1.0);
        fill(&mut p.head, d.powf(-0.5));
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|t| t.tensor.fill(0.0));
        z
    }

    /// All tensors in canonical order.
    pub fn named(&self) -> Vec<NamedTensor<'_>> {
        let mut out = vec![
            NamedTensor { name: "embed".into(), layer: None, tensor: &self.embed },
            NamedTensor { name: "pos".into(), layer: None, tensor: &self.pos },
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (n, t) in BLOCK_NAMES.iter().zip(b.tensors()) {
                out.push(NamedTensor { name: format!("layers.{l}.{n}"), layer: Some(l), tensor: t });
            }
        }
        out.push(NamedTensor { name: "final_ln.g".into(), layer: None, tensor: &self.lnf_g });
        out.push(NamedTensor { name: "final_ln.b".into(), layer: None, tensor: &self.lnf_b });
        out.push(NamedTensor { name: "head".into(), layer: None, tensor: &self.head });
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(NamedTensorMut<'_>)) {
        f(NamedTensorMut { name: "embed".into(), layer: None, tensor: &mut self.embed });
        f(NamedTensorMut { name: "pos".into(), layer: None, tensor: &mut self.pos });
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in BLOCK_NAMES.iter().zip(b.tensors_mut()) {
                f(NamedTensorMut { name: format!("layers.{l}.{n}"), layer: Some(l), tensor: t });
            }
        }
        f(NamedTensorMut { name: "final_ln.g".into(), layer: None, tensor: &mut self.lnf_g });
        f(NamedTensorMut { name: "final_ln.b".into(), layer: None, tensor: &mut self.lnf_b });
        f(NamedTensorMut { name: "head".into(), layer: None, tensor: &mut self.head });
    }

    /// Pairs every tensor of `self` with the matching tensor of `other`.
    pub fn zip_mut(&mut self, other: &Params, mut f: impl FnMut(Option<usize>, &mut DMatrix<f64>, &DMatrix<f64>)) {
        let others = other.named();
        let mut it = others.into_iter();
        self.visit_mut(|t| {
            let o = it.next().expect("same structure");
            f(t.layer, t.tensor, o.tensor);
        });
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.named()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| t.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DMatrix<f64>> {
        let (layer, field) = parse_name(name)?;
        Ok(match layer {
            None => match field {
                "embed" => &mut self.embed,
                "pos" => &mut self.pos,
                "final_ln.g" => &mut self.lnf_g,
                "final_ln.b" => &mut self.lnf_b,
                "head" => &mut self.head,
                _ => return Err(Error::UnknownParameter(name.into())),
            },
            Some(l) => {
                let b = self
                    .blocks
                    .get_mut(l)
                    .ok_or_else(|| Error::UnknownParameter(name.into()))?;
                let idx = BLOCK_NAMES
                    .iter()
                    .position(|n| *n == field)
                    .ok_or_else(|| Error::UnknownParameter(name.into()))?;
                b.tensors_mut().into_iter().nth(idx).expect("index in range")
            }
        })
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|t| t.tensor.iter().all(|x| x.is_finite()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|t| t.tensor.len()).sum()
    }

    /// Squared L2 norm over every tensor.
    pub fn norm_squared(&self) -> f64 {
        self.named().iter().map(|t| t.tensor.norm_squared()).sum()
    }
}

fn parse_name(name: &str) -> Result<(Option<usize>, &str)> {
    if let Some(rest) = name.strip_prefix("layers.") {
        let (idx, field) = rest
            .split_once('.')
            .ok_or_else(|| Error::UnknownParameter(name.into()))?;
        let l = idx
            .parse::<usize>()
            .map_err(|_| Error::UnknownParameter(name.into()))?;
        Ok((Some(l), field))
    } else {
        Ok((None, name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_resolvable() {
        let cfg = ModelConfig { n_layers: 2, vocab_size: 16, d_model: 8, n_heads: 2, d_ff: 12, ..Default::default() };
        let mut p = Params::init(&cfg);
        let names: Vec<String> = p.named().into_iter().map(|t| t.name).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        for n in &names {
            let shape = p.get(n).unwrap().shape();
            assert_eq!(p.get_mut(n).unwrap().shape(), shape);
        }
        assert!(matches!(p.get("layers.9.mlp.w_out"), Err(Error::UnknownParameter(_))));
        assert!(p.get_mut("nope").is_err());
        assert_eq!(p.get("layers.1.mlp.w_out").unwrap().shape(), (8, 12));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ModelConfig { seed: 7, ..Default::default() };
        assert_eq!(Params::init(&cfg), Params::init(&cfg));
        let other = ModelConfig { seed: 8, ..Default::default() };
        assert_ne!(Params::init(&cfg), Params::init(&other));
    }
}
