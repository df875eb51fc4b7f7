use serde::{Deserialize, Serialize};

use super::layers::{ConvKernel, Gate, Linear};
use super::scan::{scan_with, InputDisc, MixerKind, ScanAlgo, ScanInputs};
use crate::error::{bail_invalid, bail_shape, Error, Result};
use crate::tensor_core::{softplus, Tensor};

/// Δ = softplus(up(down(x))), with `down` an optional low-rank factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaProj {
    pub down: Option<Tensor>,
    pub up: Linear,
}

impl DeltaProj {
    pub fn full(up: Linear) -> Self {
        DeltaProj { down: None, up }
    }

    /// Weights 0 and bias softplus⁻¹(value): Δ ≡ value.
    pub fn constant(out: usize, inp: usize, value: f64) -> Self {
        let mut up = Linear::zeros(out, inp, true);
        up.bias
            .as_mut()
            .unwrap()
            .data_mut()
            .fill(crate::tensor_core::softplus_inv(value));
        DeltaProj { down: None, up }
    }

    pub fn in_dim(&self) -> usize {
        match &self.down {
            Some(w) => w.shape()[1],
            None => self.up.in_dim(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.down.as_ref().map_or(0, |w| w.len()) + self.up.num_params()
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut pre = match &self.down {
            Some(w) => {
                let low = Linear {
                    weight: w.clone(),
                    bias: None,
                }
                .forward(x, rows);
                self.up.forward(&low, rows)
            }
            None => self.up.forward(x, rows),
        };
        pre.iter_mut().for_each(|v| *v = softplus(*v));
        pre
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmParams {
    /// Nonnegative rates, `[d, N]` (or `[1]` for mamba2).
    pub lambda: Tensor,
    pub delta_proj: Option<DeltaProj>,
    pub b_proj: Option<Linear>,
    pub c_proj: Option<Linear>,
    pub static_b: Option<Tensor>,
    pub static_c: Option<Tensor>,
    #[serde(default)]
    pub disc: InputDisc,
}

impl SsmParams {
    pub fn num_params(&self) -> usize {
        self.lambda.len()
            + self.delta_proj.as_ref().map_or(0, |p| p.num_params())
            + self.b_proj.as_ref().map_or(0, |p| p.num_params())
            + self.c_proj.as_ref().map_or(0, |p| p.num_params())
            + self.static_b.as_ref().map_or(0, |p| p.len())
            + self.static_c.as_ref().map_or(0, |p| p.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub builder: String,
    pub args: serde_json::Value,
    pub seed: Option<u64>,
}

/// One embedding → mixer → head model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaBlock {
    pub kind: MixerKind,
    pub vocab: usize,
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    /// Last embedding channel carries t/T; the table then has d-1 columns.
    pub pe: bool,
    /// Skip convolutions and gate.
    pub simplified: bool,
    pub embedding: Tensor,
    /// Shared kernel for s4d/mamba/mamba_dt, value kernel for mamba2.
    pub conv: Option<ConvKernel>,
    pub conv_b: Option<ConvKernel>,
    pub conv_c: Option<ConvKernel>,
    /// mamba2 value-path linear map before `conv`.
    pub in_proj: Option<Linear>,
    pub ssm: SsmParams,
    pub gate: Option<Gate>,
    pub out_proj: Linear,
    pub provenance: Option<Provenance>,
}

/// Intermediate activations of one forward pass, all row-major over time.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub delta: Option<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub y: Vec<f64>,
    pub logits: Tensor,
}

impl MambaBlock {
    pub fn num_params(&self) -> usize {
        self.embedding.len()
            + [&self.conv, &self.conv_b, &self.conv_c]
                .iter()
                .map(|k| k.as_ref().map_or(0, |k| k.num_params()))
                .sum::<usize>()
            + self.in_proj.as_ref().map_or(0, |l| l.num_params())
            + self.ssm.num_params()
            + self.gate.as_ref().map_or(0, |g| g.num_params())
            + self.out_proj.num_params()
    }

    pub fn emb_cols(&self) -> usize {
        if self.pe {
            self.d - 1
        } else {
            self.d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.d, self.n);
        if self.pe && d < 2 {
            bail_invalid!("positional channel needs d >= 2");
        }
        if self.embedding.shape() != [self.vocab, self.emb_cols()] {
            bail_shape!(
                "embedding {:?} should be [{}, {}]",
                self.embedding.shape(),
                self.vocab,
                self.emb_cols()
            );
        }
        let lam_shape: Vec<usize> = if self.kind == MixerKind::Mamba2 {
            vec![1]
        } else {
            vec![d, n]
        };
        if self.ssm.lambda.shape() != lam_shape.as_slice() {
            bail_shape!(
                "rates {:?} should be {:?}",
                self.ssm.lambda.shape(),
                lam_shape
            );
        }
        if self.ssm.lambda.data().iter().any(|&l| !(l >= 0.0)) {
            bail_invalid!("rates must be nonnegative");
        }
        let convs = [&self.conv, &self.conv_b, &self.conv_c];
        match self.kind {
            MixerKind::Mamba2 => {
                if !self.simplified && convs.iter().any(|k| k.is_none()) {
                    bail_invalid!("mamba2 needs three independent kernels");
                }
            }
            _ => {
                if self.conv_b.is_some() || self.conv_c.is_some() || self.in_proj.is_some() {
                    bail_invalid!("{} shares a single kernel", self.kind.name());
                }
                if !self.simplified && self.conv.is_none() {
                    bail_invalid!("full block needs a kernel");
                }
            }
        }
        let s4d = self.kind == MixerKind::S4d;
        let ssm = &self.ssm;
        if s4d {
            if ssm
                .static_b
                .as_ref()
                .map(|b| b.shape() != [n])
                .unwrap_or(true)
                || ssm
                    .static_c
                    .as_ref()
                    .map(|c| c.shape() != [n])
                    .unwrap_or(true)
                || ssm.b_proj.is_some()
                || ssm.c_proj.is_some()
                || ssm.delta_proj.is_some()
            {
                bail_invalid!("s4d takes static B, C of length N and no projections");
            }
        } else {
            if ssm.static_b.is_some() || ssm.static_c.is_some() {
                bail_invalid!("{} takes input-dependent B, C", self.kind.name());
            }
            let (Some(bp), Some(cp), Some(dp)) = (&ssm.b_proj, &ssm.c_proj, &ssm.delta_proj) else {
                bail_invalid!("{} needs B, C and Δ projections", self.kind.name());
            };
            if bp.out_dim() != n || cp.out_dim() != n || bp.in_dim() != d || cp.in_dim() != d {
                bail_shape!("B/C projections must map {} -> {}", d, n);
            }
            if dp.up.out_dim() != self.kind.delta_width(d, n) || dp.in_dim() != d {
                bail_shape!(
                    "Δ projection must map {} -> {}",
                    d,
                    self.kind.delta_width(d, n)
                );
            }
        }
        let ch = |k: &Option<ConvKernel>, c: usize| k.as_ref().map_or(true, |k| k.channels() == c);
        if !ch(&self.conv, d) || !ch(&self.conv_b, n) || !ch(&self.conv_c, n) {
            bail_shape!("kernel channel counts do not match");
        }
        if let Some(ip) = &self.in_proj {
            if ip.in_dim() != d || ip.out_dim() != d {
                bail_shape!("value projection must be d -> d");
            }
        }
        if let Some(g) = &self.gate {
            if g.linear.in_dim() != d || g.linear.out_dim() != d {
                bail_shape!("gate must be d -> d");
            }
        }
        if self.out_proj.in_dim() != d || self.out_proj.out_dim() != self.classes {
            bail_shape!("output head must map {} -> {}", d, self.classes);
        }
        Ok(())
    }

    /// Embedded input `[T, d]`, with t/T in the last channel when PE is on.
    pub fn embed(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let (d, e) = (self.d, self.emb_cols());
        let tl = tokens.len();
        let mut x = Vec::with_capacity(tl * d);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok >= self.vocab {
                bail_invalid!("token {} outside vocabulary of {}", tok, self.vocab);
            }
            x.extend_from_slice(&self.embedding.data()[tok * e..(tok + 1) * e]);
            if self.pe {
                x.push((t + 1) as f64 / tl as f64);
            }
        }
        Ok(x)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let b: MambaBlock = serde_json::from_str(s)?;
        b.validate()?;
        Ok(b)
    }

    /// Per-step decay factors `[T][d][N]` for one sequence.
    pub fn decay_factors(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let tr = Evaluator::new(self)?.trace(tokens, ScanAlgo::Sequential)?;
        let inp = self.scan_inputs(&tr, tokens.len());
        Ok(inp.decay_factors())
    }

    fn scan_inputs<'a>(&'a self, tr: &'a BlockTrace, tl: usize) -> ScanInputs<'a> {
        let s4d = self.kind == MixerKind::S4d;
        ScanInputs {
            kind: self.kind,
            d: self.d,
            n: self.n,
            t: tl,
            lambda: self.ssm.lambda.data(),
            xhat: &tr.xhat,
            delta: tr.delta.as_deref(),
            b: if s4d {
                self.ssm.static_b.as_ref().unwrap().data()
            } else {
                &tr.b
            },
            c: if s4d {
                self.ssm.static_c.as_ref().unwrap().data()
            } else {
                &tr.c
            },
            static_bc: s4d,
            disc: self.ssm.disc,
        }
    }
}

/// Inference helper that caches token-level projections of linear maps
/// applied directly to the embedding (only when no positional channel).
pub struct Evaluator<'a> {
    block: &'a MambaBlock,
    tables: Vec<Option<Vec<f64>>>,
}

const P_IN: usize = 0;
const P_B: usize = 1;
const P_C: usize = 2;
const P_DELTA: usize = 3;
const P_GATE: usize = 4;

impl<'a> Evaluator<'a> {
    pub fn new(block: &'a MambaBlock) -> Result<Self> {
        block.validate()?;
        let mut tables = vec![None, None, None, None, None];
        if !block.pe {
            let emb = block.embedding.data();
            let v = block.vocab;
            if block.kind == MixerKind::Mamba2 {
                if let Some(l) = &block.in_proj {
                    tables[P_IN] = Some(l.forward(emb, v));
                }
                tables[P_B] = Some(block.ssm.b_proj.as_ref().unwrap().forward(emb, v));
                tables[P_C] = Some(block.ssm.c_proj.as_ref().unwrap().forward(emb, v));
                tables[P_DELTA] = Some(block.ssm.delta_proj.as_ref().unwrap().forward(emb, v));
            }
            if let Some(g) = &block.gate {
                if !block.simplified {
                    tables[P_GATE] = Some(g.linear.forward(emb, v));
                }
            }
        }
        Ok(Evaluator { block, tables })
    }

    pub fn block(&self) -> &'a MambaBlock {
        self.block
    }

    fn gather(&self, slot: usize, tokens: &[usize], width: usize) -> Option<Vec<f64>> {
        self.tables[slot].as_ref().map(|tab| {
            let mut out = Vec::with_capacity(tokens.len() * width);
            for &t in tokens {
                out.extend_from_slice(&tab[t * width..(t + 1) * width]);
            }
            out
        })
    }

    pub fn trace(&self, tokens: &[usize], algo: ScanAlgo) -> Result<BlockTrace> {
        let b = self.block;
        let (d, n, tl) = (b.d, b.n, tokens.len());
        if tl == 0 {
            bail_invalid!("empty token sequence");
        }
        let x = b.embed(tokens)?;
        let ssm = &b.ssm;
        let conv = |k: &Option<ConvKernel>, v: Vec<f64>| match (b.simplified, k) {
            (false, Some(k)) => k.forward(&v, tl),
            _ => v,
        };
        let (xhat, delta, bs, cs) = match b.kind {
            MixerKind::Mamba2 => {
                let u = match &b.in_proj {
                    Some(l) => self
                        .gather(P_IN, tokens, d)
                        .unwrap_or_else(|| l.forward(&x, tl)),
                    None => x.clone(),
                };
                let xhat = conv(&b.conv, u);
                let bp = self
                    .gather(P_B, tokens, n)
                    .unwrap_or_else(|| ssm.b_proj.as_ref().unwrap().forward(&x, tl));
                let cp = self
                    .gather(P_C, tokens, n)
                    .unwrap_or_else(|| ssm.c_proj.as_ref().unwrap().forward(&x, tl));
                let dl = self
                    .gather(P_DELTA, tokens, 1)
                    .unwrap_or_else(|| ssm.delta_proj.as_ref().unwrap().forward(&x, tl));
                (xhat, Some(dl), conv(&b.conv_b, bp), conv(&b.conv_c, cp))
            }
            MixerKind::S4d => (conv(&b.conv, x.clone()), None, vec![], vec![]),
            MixerKind::Mamba | MixerKind::MambaDt => {
                let xhat = conv(&b.conv, x.clone());
                let dl = ssm.delta_proj.as_ref().unwrap().forward(&xhat, tl);
                let bp = ssm.b_proj.as_ref().unwrap().forward(&xhat, tl);
                let cp = ssm.c_proj.as_ref().unwrap().forward(&xhat, tl);
                (xhat, Some(dl), bp, cp)
            }
        };
        let mut tr = BlockTrace {
            x,
            xhat,
            delta,
            b: bs,
            c: cs,
            y: vec![],
            logits: Tensor::zeros(&[0]),
        };
        let out = scan_with(algo, &b.scan_inputs(&tr, tl))?;
        let mut y = out.y.into_data();
        if let (Some(g), false) = (&b.gate, b.simplified) {
            let gpre = self
                .gather(P_GATE, tokens, d)
                .unwrap_or_else(|| g.linear.forward(&tr.x, tl));
            for (yv, gv) in y.iter_mut().zip(gpre) {
                *yv *= g.act.apply(gv);
            }
        }
        let logits = b.out_proj.forward(&y, tl);
        tr.y = y;
        tr.logits = Tensor::new(vec![tl, b.classes], logits)?;
        Ok(tr)
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.trace(tokens, ScanAlgo::Auto)?.logits)
    }
}

/// Logits `[T, classes]` for one token sequence.
pub fn block_forward(block: &MambaBlock, tokens: &[usize]) -> Result<Tensor> {
    Evaluator::new(block)?.forward(tokens)
}

impl std::str::FromStr for MixerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mixer kind {s}")))
    }
}
