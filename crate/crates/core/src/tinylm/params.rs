use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};
use crate::seed;

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Flat parameter order, also the checkpoint order:
/// token embedding `[V, d]`, position embedding `[C, d]`, then per block
/// `ln1_g, ln1_b, wq, wk, wv, wo [d, d], ln2_g, ln2_b, w1 [d, ff], b1, w2 [ff, d], b2`,
/// then `lnf_g, lnf_b` and the output projection `[d, V]`. Matrices are
/// row-major with the input dimension first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let tok_emb = take(v * d);
        let pos_emb = take(cfg.context_len * d);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * ff),
                b1: take(ff),
                w2: take(ff * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            total: at,
        }
    }

    /// Named tensors in flat order.
    pub fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, r) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("block{}.{name}", l + 1), r.clone()));
            }
        }
        out.push(("lnf_g".into(), self.lnf_g.clone()));
        out.push(("lnf_b".into(), self.lnf_b.clone()));
        out.push(("w_out".into(), self.w_out.clone()));
        out
    }

    /// Human-readable name of flat index `idx`, e.g. `block2.wq[17]`.
    pub fn name_of(&self, idx: usize) -> String {
        self.named()
            .into_iter()
            .find(|(_, r)| r.contains(&idx))
            .map(|(n, r)| format!("{n}[{}]", idx - r.start))
            .unwrap_or_else(|| format!("param[{idx}]"))
    }
}

/// All model weights in one flat buffer described by [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Gaussian init (std 0.02, residual output projections scaled by
    /// `1/sqrt(2 n_layers)`), unit norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut data = vec![F::zero(); layout.total];
        let mut rng = seed::rng(seed::derive(seed, "model/init", &[]));
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |r: &std::ops::Range<usize>, s: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let normal = Normal::new(0.0, s).expect("valid std");
            for x in &mut data[r.clone()] {
                *x = F::of(normal.sample(rng));
            }
        };
        fill(&layout.tok_emb, std, &mut rng);
        fill(&layout.pos_emb, std, &mut rng);
        for b in &layout.blocks {
            fill(&b.wq, std, &mut rng);
            fill(&b.wk, std, &mut rng);
            fill(&b.wv, std, &mut rng);
            fill(&b.wo, resid_std, &mut rng);
            fill(&b.w1, std, &mut rng);
            fill(&b.w2, resid_std, &mut rng);
        }
        fill(&layout.w_out, std, &mut rng);
        for r in layout
            .blocks
            .iter()
            .flat_map(|b| [b.ln1_g.clone(), b.ln2_g.clone()])
            .chain(std::iter::once(layout.lnf_g.clone()))
        {
            data[r].iter_mut().for_each(|x| *x = F::one());
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(config: &ModelConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if data.len() != layout.total {
            return Err(Error::Invalid(format!(
                "parameter count {} does not match config ({})",
                data.len(),
                layout.total
            )));
        }
        Ok(ModelParams {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn get(&self, r: &Range<usize>) -> &[F] {
        &self.data[r.clone()]
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn checksum(&self) -> String {
        seed::content_hash(&super::checkpoint_bytes(self))
    }

    /// Perturb every weight with small Gaussian noise; used by tests to get
    /// away from the symmetric initial point.
    pub fn jitter<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for x in &mut self.data {
            *x += F::of(normal.sample(rng));
        }
    }
}

/// Gradients for the requested subset of {parameters, steering direction,
/// steering strength}.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<F> {
    pub params: Option<Vec<F>>,
    pub direction: Option<Vec<F>>,
    pub strength: Option<F>,
}

impl<F: Scalar> GradBundle<F> {
    pub fn scale(&mut self, by: F) {
        if let Some(p) = &mut self.params {
            p.iter_mut().for_each(|x| *x *= by);
        }
        if let Some(d) = &mut self.direction {
            d.iter_mut().for_each(|x| *x *= by);
        }
        if let Some(s) = &mut self.strength {
            *s *= by;
        }
    }
}
