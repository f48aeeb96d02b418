use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::sigmoid;
use super::pca::PcaBasis;
use super::PredictorFeatures;
use crate::error::{Error, Result};
use crate::workload::LayerGroup;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Depth of one layer's predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    pub width: usize,
    pub blocks: usize,
    /// Adds a gated two-block residual unit after the plain blocks.
    pub residual: bool,
}

impl NetArch {
    /// Shallow nets for the noisy input/output groups, deeper gated nets for
    /// the middle.
    pub fn for_group(group: LayerGroup, width: usize) -> Self {
        match group {
            LayerGroup::Middle => NetArch {
                width,
                blocks: 3,
                residual: true,
            },
            _ => NetArch {
                width,
                blocks: 2,
                residual: false,
            },
        }
    }
}

/// Offsets of an affine map `out x inp` (row-major) and its bias inside the
/// flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl Dense {
    fn alloc(next: &mut usize, inp: usize, out: usize) -> Self {
        let w = *next;
        let b = w + inp * out;
        *next = b + out;
        Dense { w, b, inp, out }
    }

    fn apply(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &params[self.w..self.b];
        for o in 0..self.out {
            let row = &w[o * self.inp..(o + 1) * self.inp];
            out.push(params[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, params: &[f64], grad: &mut [f64], x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for o in 0..self.out {
            let d = dy[o];
            if d == 0.0 {
                continue;
            }
            grad[self.b + o] += d;
            let base = self.w + o * self.inp;
            for i in 0..self.inp {
                grad[base + i] += d * x[i];
                dx[i] += d * params[base + i];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Residual {
    a: Dense,
    b: Dense,
    /// Scalar gate `sigmoid(v . hidden_reduced + c)`.
    gate_w: usize,
    gate_b: usize,
}

/// Predictor for one target layer: it reads the previous layer's routing
/// features and scores every expert of the target layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNet {
    pub target_layer: usize,
    pub group: LayerGroup,
    pub arch: NetArch,
    pub experts: usize,
    pub dropout: f64,
    #[serde(skip)]
    pub pca: PcaBasis,
    /// Per-component whitening factors applied after projection.
    #[serde(skip)]
    pub scale: Vec<f64>,
    #[serde(skip)]
    pub params: Vec<f64>,
    blocks: Vec<Dense>,
    residual: Option<Residual>,
    head: Dense,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Input, pre-activation and dropout multiplier of every hidden block in
    /// application order (plain blocks, then the residual pair).
    block_in: Vec<Vec<f64>>,
    block_pre: Vec<Vec<f64>>,
    block_mask: Vec<Vec<f64>>,
    /// Post-dropout activations of every hidden block.
    pub activations: Vec<Vec<f64>>,
    gate: f64,
    head_in: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub cache: ForwardCache,
}

impl LayerNet {
    pub fn new(
        target_layer: usize,
        group: LayerGroup,
        arch: NetArch,
        pca: PcaBasis,
        experts: usize,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if arch.width == 0 || arch.blocks == 0 || experts == 0 {
            return Err(Error::InvalidConfig("predictor width, block count and experts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout {dropout} outside [0, 1]")));
        }
        let d = pca.dim();
        let input = d + 2 * experts;
        let mut next = 0;
        let mut blocks = Vec::with_capacity(arch.blocks);
        let mut inp = input;
        for _ in 0..arch.blocks {
            blocks.push(Dense::alloc(&mut next, inp, arch.width));
            inp = arch.width;
        }
        let residual = arch.residual.then(|| {
            let a = Dense::alloc(&mut next, arch.width, arch.width);
            let b = Dense::alloc(&mut next, arch.width, arch.width);
            let gate_w = next;
            let gate_b = gate_w + d;
            next = gate_b + 1;
            Residual { a, b, gate_w, gate_b }
        });
        let head = Dense::alloc(&mut next, arch.width, experts);
        let mut params = vec![0.0; next];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (target_layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let denses = blocks.iter().copied().chain(residual.iter().flat_map(|r| [r.a, r.b])).chain([head]);
        for dense in denses {
            let bound = (6.0 / dense.inp as f64).sqrt();
            for w in &mut params[dense.w..dense.b] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let scale = pca.variances.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Ok(LayerNet {
            target_layer,
            group,
            arch,
            experts,
            dropout,
            pca,
            scale,
            params,
            blocks,
            residual,
            head,
        })
    }

    /// Parameter count implied by the layer layout.
    pub(crate) fn layout_len(&self) -> usize {
        self.head.b + self.head.out
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.pca.dim() + 2 * self.experts
    }

    /// Builds the feature vector from the previous layer's gating input,
    /// selected experts and gate weights.
    pub fn features(&self, hidden: &[f64], active: &[usize], gate_weights: &[f64]) -> Result<PredictorFeatures> {
        if gate_weights.len() != self.experts {
            return Err(Error::ShapeMismatch {
                expected: self.experts,
                actual: gate_weights.len(),
            });
        }
        let mut reduced = self.pca.apply(hidden)?;
        reduced.iter_mut().zip(&self.scale).for_each(|(z, s)| *z *= s);
        let mut onehot = vec![0.0; self.experts];
        for &e in active {
            if e >= self.experts {
                return Err(Error::IndexOutOfRange {
                    index: e,
                    len: self.experts,
                });
            }
            onehot[e] = 1.0;
        }
        Ok(PredictorFeatures {
            hidden_reduced: reduced,
            active_onehot: onehot,
            gate_weights_prev: gate_weights.iter().map(|w| w * self.experts as f64).collect(),
        })
    }

    pub fn forward(&self, feat: &PredictorFeatures, train: bool, rng: &mut ChaCha8Rng) -> Result<Forward> {
        let d = self.pca.dim();
        if feat.hidden_reduced.len() != d {
            return Err(Error::ShapeMismatch {
                expected: d,
                actual: feat.hidden_reduced.len(),
            });
        }
        for v in [&feat.active_onehot, &feat.gate_weights_prev] {
            if v.len() != self.experts {
                return Err(Error::ShapeMismatch {
                    expected: self.experts,
                    actual: v.len(),
                });
            }
        }
        Ok(self.forward_input(&feat.to_input(), train, rng))
    }

    /// Deterministic inference logits.
    pub fn logits(&self, feat: &PredictorFeatures) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(feat, false, &mut rng)?.logits)
    }

    pub(crate) fn forward_input(&self, x: &[f64], train: bool, rng: &mut ChaCha8Rng) -> Forward {
        let p = &self.params;
        let mut cache = ForwardCache {
            input: x.to_vec(),
            ..Default::default()
        };
        let keep = 1.0 - self.dropout;
        let mut hidden_block = |dense: &Dense, input: Vec<f64>, cache: &mut ForwardCache| {
            let mut pre = Vec::with_capacity(dense.out);
            dense.apply(p, &input, &mut pre);
            let mask: Vec<f64> = if train && self.dropout > 0.0 {
                (0..dense.out)
                    .map(|_| if keep > 0.0 && rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            } else {
                vec![1.0; dense.out]
            };
            let out: Vec<f64> = pre.iter().zip(&mask).map(|(&z, &m)| gelu(z) * m).collect();
            cache.block_in.push(input);
            cache.block_pre.push(pre);
            cache.block_mask.push(mask);
            cache.activations.push(out.clone());
            out
        };
        let mut h = x.to_vec();
        for dense in &self.blocks {
            h = hidden_block(dense, h, &mut cache);
        }
        if let Some(r) = &self.residual {
            let skip = h.clone();
            let a = hidden_block(&r.a, h, &mut cache);
            let b = hidden_block(&r.b, a, &mut cache);
            let d = self.pca.dim();
            let s = p[r.gate_b] + p[r.gate_w..r.gate_w + d].iter().zip(&x[..d]).map(|(v, z)| v * z).sum::<f64>();
            let g = sigmoid(s);
            cache.gate = g;
            h = skip.iter().zip(&b).map(|(s, r)| s + g * r).collect();
        }
        let mut logits = Vec::with_capacity(self.experts);
        self.head.apply(p, &h, &mut logits);
        cache.head_in = h;
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Forward { logits, probs, cache }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let mut dh = self.head.backward(p, grad, &cache.head_in, dlogits);
        let block_back = |dense: &Dense, k: usize, dout: &[f64], grad: &mut [f64]| {
            let dpre: Vec<f64> = dout
                .iter()
                .zip(&cache.block_mask[k])
                .zip(&cache.block_pre[k])
                .map(|((&g, &m), &z)| g * m * gelu_grad(z))
                .collect();
            dense.backward(p, grad, &cache.block_in[k], &dpre)
        };
        let nb = self.blocks.len();
        if let Some(r) = &self.residual {
            let g = cache.gate;
            let rb = &cache.activations[nb + 1];
            let dg: f64 = dh.iter().zip(rb).map(|(a, b)| a * b).sum();
            let ds = dg * g * (1.0 - g);
            let d = self.pca.dim();
            grad[r.gate_b] += ds;
            for i in 0..d {
                grad[r.gate_w + i] += ds * cache.input[i];
            }
            let dr: Vec<f64> = dh.iter().map(|v| g * v).collect();
            let da = block_back(&r.b, nb + 1, &dr, grad);
            let dskip = block_back(&r.a, nb, &da, grad);
            dh.iter_mut().zip(&dskip).for_each(|(a, b)| *a += b);
        }
        for k in (0..nb).rev() {
            dh = block_back(&self.blocks[k], k, &dh, grad);
        }
    }
}
