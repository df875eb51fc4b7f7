use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail_invalid, Result};
use crate::mixers::{
    Act, ConvKernel, DeltaProj, Gate, InputDisc, Linear, MambaBlock, MixerKind, Provenance,
    SsmParams,
};
use crate::tensor_core::{softplus_inv, Graph, NodeId, Tensor, UnaryOp};

pub const CONV_WIDTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: MixerKind,
    pub d: usize,
    pub n: usize,
    /// Embedding rows.
    pub vocab: usize,
    pub classes: usize,
    pub pe: bool,
    pub simplified: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.vocab == 0 || self.classes == 0 {
            bail_invalid!("model dimensions must be positive");
        }
        if self.pe && self.d < 2 {
            bail_invalid!("positional channel needs d >= 2");
        }
        Ok(())
    }

    pub fn dt_rank(&self) -> usize {
        self.d.div_ceil(16)
    }

    fn emb_cols(&self) -> usize {
        if self.pe {
            self.d - 1
        } else {
            self.d
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Slots {
    emb: usize,
    log_lambda: usize,
    static_b: Option<usize>,
    static_c: Option<usize>,
    dt_down: Option<usize>,
    dt_up: Option<usize>,
    dt_bias: Option<usize>,
    b_w: Option<usize>,
    c_w: Option<usize>,
    in_w: Option<usize>,
    conv: Option<(usize, usize)>,
    conv_b: Option<(usize, usize)>,
    conv_c: Option<(usize, usize)>,
    gate: Option<(usize, usize)>,
    out_w: usize,
    out_b: usize,
}

/// Trainable parameters of one block; rates are stored as `log λ`.
#[derive(Clone, Debug)]
pub struct TrainModel {
    pub cfg: ModelConfig,
    pub params: Vec<Tensor>,
    pub(crate) slots: Slots,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.gen_range(-bound..=bound)).collect(),
    )
    .unwrap()
}

impl TrainModel {
    /// Uniform(±1/√fan_in) maps, N(0,1) embeddings, log-uniform λ in
    /// [1e-3, 1e-1], Δ bias with softplus(bias) = 1.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, n) = (cfg.d, cfg.n);
        let mut params = vec![];
        let mut add = |t: Tensor| {
            params.push(t);
            params.len() - 1
        };
        let emb_len = cfg.vocab * cfg.emb_cols();
        let emb = add(Tensor::new(
            vec![cfg.vocab, cfg.emb_cols()],
            (0..emb_len).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap());
        let lam_len = cfg.kind.lambda_len(d, n);
        let lam_shape = if cfg.kind == MixerKind::Mamba2 {
            vec![1]
        } else {
            vec![d, n]
        };
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let log_lambda = add(Tensor::new(
            lam_shape,
            (0..lam_len).map(|_| rng.gen_range(lo..hi)).collect(),
        )
        .unwrap());
        let mut s = Slots {
            emb,
            log_lambda,
            ..Default::default()
        };
        let fan = 1.0 / (d as f64).sqrt();
        let conv = |rng: &mut ChaCha8Rng, ch: usize, add: &mut dyn FnMut(Tensor) -> usize| {
            let c = add(uniform(
                rng,
                &[CONV_WIDTH, ch],
                1.0 / (CONV_WIDTH as f64).sqrt(),
            ));
            let b = add(Tensor::zeros(&[ch]));
            (c, b)
        };
        match cfg.kind {
            MixerKind::S4d => {
                s.static_b = Some(add(uniform(&mut rng, &[n], 1.0)));
                s.static_c = Some(add(uniform(&mut rng, &[n], 1.0)));
            }
            MixerKind::Mamba | MixerKind::MambaDt => {
                let r = cfg.dt_rank();
                let w = cfg.kind.delta_width(d, n);
                s.dt_down = Some(add(uniform(&mut rng, &[r, d], fan)));
                s.dt_up = Some(add(uniform(&mut rng, &[w, r], 1.0 / (r as f64).sqrt())));
                s.dt_bias = Some(add(Tensor::full(&[w], softplus_inv(1.0))));
                s.b_w = Some(add(uniform(&mut rng, &[n, d], fan)));
                s.c_w = Some(add(uniform(&mut rng, &[n, d], fan)));
            }
            MixerKind::Mamba2 => {
                if !cfg.simplified {
                    s.in_w = Some(add(uniform(&mut rng, &[d, d], fan)));
                }
                s.dt_up = Some(add(uniform(&mut rng, &[1, d], fan)));
                s.dt_bias = Some(add(Tensor::full(&[1], softplus_inv(1.0))));
                s.b_w = Some(add(uniform(&mut rng, &[n, d], fan)));
                s.c_w = Some(add(uniform(&mut rng, &[n, d], fan)));
            }
        }
        if !cfg.simplified {
            s.conv = Some(conv(&mut rng, d, &mut add));
            if cfg.kind == MixerKind::Mamba2 {
                s.conv_b = Some(conv(&mut rng, n, &mut add));
                s.conv_c = Some(conv(&mut rng, n, &mut add));
            }
            s.gate = Some((
                add(uniform(&mut rng, &[d, d], fan)),
                add(uniform(&mut rng, &[d], fan)),
            ));
        }
        s.out_w = add(uniform(&mut rng, &[cfg.classes, d], fan));
        s.out_b = add(uniform(&mut rng, &[cfg.classes], fan));
        Ok(TrainModel {
            cfg,
            params,
            slots: s,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Registers every tensor as a graph parameter, in `params` order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Output rows `[B*T, d]` before the head for a batch of equal-length
    /// sequences.
    pub fn mixer_graph(&self, g: &mut Graph, ids: &[NodeId], batch: &[&[usize]]) -> Result<NodeId> {
        let cfg = &self.cfg;
        let s = &self.slots;
        let tl = batch.first().map(|b| b.len()).unwrap_or(0);
        if tl == 0 || batch.iter().any(|b| b.len() != tl) {
            bail_invalid!("batch needs nonempty sequences of equal length");
        }
        let flat: Vec<usize> = batch.iter().flat_map(|b| b.iter().copied()).collect();
        let mut x = g.gather(ids[s.emb], &flat)?;
        if cfg.pe {
            let pos: Vec<f64> = (0..flat.len())
                .map(|r| (r % tl + 1) as f64 / tl as f64)
                .collect();
            x = g.append_col(x, &pos)?;
        }
        let conv = |g: &mut Graph, v: NodeId, k: Option<(usize, usize)>| -> Result<NodeId> {
            match k {
                Some((c, b)) => {
                    let pre = g.conv(v, ids[c], ids[b], tl)?;
                    Ok(g.unary(UnaryOp::Silu, pre))
                }
                None => Ok(v),
            }
        };
        let lambda = g.unary(UnaryOp::Exp, ids[s.log_lambda]);
        let y = match cfg.kind {
            MixerKind::S4d => {
                let xh = conv(g, x, s.conv)?;
                g.scan(
                    cfg.kind,
                    lambda,
                    xh,
                    None,
                    ids[s.static_b.unwrap()],
                    ids[s.static_c.unwrap()],
                    tl,
                )?
            }
            MixerKind::Mamba | MixerKind::MambaDt => {
                let xh = conv(g, x, s.conv)?;
                let low = g.linear(xh, ids[s.dt_down.unwrap()], None)?;
                let pre = g.linear(low, ids[s.dt_up.unwrap()], Some(ids[s.dt_bias.unwrap()]))?;
                let dl = g.unary(UnaryOp::Softplus, pre);
                let b = g.linear(xh, ids[s.b_w.unwrap()], None)?;
                let c = g.linear(xh, ids[s.c_w.unwrap()], None)?;
                g.scan(cfg.kind, lambda, xh, Some(dl), b, c, tl)?
            }
            MixerKind::Mamba2 => {
                let u = match s.in_w {
                    Some(w) => g.linear(x, ids[w], None)?,
                    None => x,
                };
                let xh = conv(g, u, s.conv)?;
                let pre = g.linear(x, ids[s.dt_up.unwrap()], Some(ids[s.dt_bias.unwrap()]))?;
                let dl = g.unary(UnaryOp::Softplus, pre);
                let b0 = g.linear(x, ids[s.b_w.unwrap()], None)?;
                let b = conv(g, b0, s.conv_b)?;
                let c0 = g.linear(x, ids[s.c_w.unwrap()], None)?;
                let c = conv(g, c0, s.conv_c)?;
                g.scan(cfg.kind, lambda, xh, Some(dl), b, c, tl)?
            }
        };
        match s.gate {
            Some((w, b)) => {
                let pre = g.linear(x, ids[w], Some(ids[b]))?;
                let gt = g.unary(UnaryOp::Silu, pre);
                g.mul(y, gt)
            }
            None => Ok(y),
        }
    }

    /// Logits for the selected rows of the flattened batch.
    pub fn head_graph(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        y: NodeId,
        rows: &[usize],
    ) -> Result<NodeId> {
        let sel = g.gather(y, rows)?;
        g.linear(sel, ids[self.slots.out_w], Some(ids[self.slots.out_b]))
    }

    /// Inference block with the same forward map.
    pub fn to_block(&self, provenance: Option<Provenance>) -> Result<MambaBlock> {
        let cfg = &self.cfg;
        let s = &self.slots;
        let p = |i: usize| self.params[i].clone();
        let po = |i: Option<usize>| i.map(|i| self.params[i].clone());
        let kernel = |k: Option<(usize, usize)>| {
            k.map(|(c, b)| ConvKernel {
                width: CONV_WIDTH,
                c: p(c),
                bias: p(b),
                act: Act::Silu,
            })
        };
        let mut lambda = p(s.log_lambda);
        lambda.data_mut().iter_mut().for_each(|v| *v = v.exp());
        let lin = |w: Option<usize>| -> Result<Option<Linear>> {
            po(w).map(|w| Linear::new(w, None)).transpose()
        };
        let delta_proj = match cfg.kind {
            MixerKind::S4d => None,
            MixerKind::Mamba | MixerKind::MambaDt => Some(DeltaProj {
                down: po(s.dt_down),
                up: Linear::new(p(s.dt_up.unwrap()), po(s.dt_bias))?,
            }),
            MixerKind::Mamba2 => Some(DeltaProj::full(Linear::new(
                p(s.dt_up.unwrap()),
                po(s.dt_bias),
            )?)),
        };
        let block = MambaBlock {
            kind: cfg.kind,
            vocab: cfg.vocab,
            d: cfg.d,
            n: cfg.n,
            classes: cfg.classes,
            pe: cfg.pe,
            simplified: cfg.simplified,
            embedding: p(s.emb),
            conv: kernel(s.conv),
            conv_b: kernel(s.conv_b),
            conv_c: kernel(s.conv_c),
            in_proj: lin(s.in_w)?,
            ssm: SsmParams {
                lambda,
                delta_proj,
                b_proj: lin(s.b_w)?,
                c_proj: lin(s.c_w)?,
                static_b: po(s.static_b),
                static_c: po(s.static_c),
                disc: InputDisc::Euler,
            },
            gate: match s.gate {
                Some((w, b)) => Some(Gate {
                    linear: Linear::new(p(w), Some(p(b)))?,
                    act: Act::Silu,
                }),
                None => None,
            },
            out_proj: Linear::new(p(s.out_w), Some(p(s.out_b)))?,
            provenance,
        };
        block.validate()?;
        Ok(block)
    }
}
