use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::head::OUTPUTS;
use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Kaiming-uniform bound for a layer followed by GELU.
fn kaiming(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Same fan-in scaling without the rectifier gain.
fn lecun(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    /// `C x K`
    pub dw_weight: Tensor,
    pub dw_bias: Tensor,
    /// `C x C/G`: output channel `c` mixes the inputs of its group.
    pub group_weight: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `F x D`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `D x F`
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    /// `8 x D`: confidence, five classes, start, end.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Every learnable tensor of the detector. Also used as the gradient
/// accumulator (same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlockParams>,
    pub layers: Vec<EncoderLayerParams>,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.c_max;
        let k = config.kernel;
        let gsize = c / config.groups;
        let f = config.ffn_dim;
        let blocks = (0..config.blocks)
            .map(|_| ConvBlockParams {
                dw_weight: Tensor::uniform(&[c, k], lecun(k), &mut rng),
                dw_bias: Tensor::zeros(&[c]),
                group_weight: Tensor::uniform(&[c, gsize], kaiming(gsize), &mut rng),
                scale: Tensor::filled(&[c], 1.0),
                shift: Tensor::zeros(&[c]),
            })
            .collect();
        let layers = (0..config.layers)
            .map(|_| EncoderLayerParams {
                ln1_gain: Tensor::filled(&[c], 1.0),
                ln1_bias: Tensor::zeros(&[c]),
                wq: Tensor::uniform(&[c, c], lecun(c), &mut rng),
                bq: Tensor::zeros(&[c]),
                wk: Tensor::uniform(&[c, c], lecun(c), &mut rng),
                bk: Tensor::zeros(&[c]),
                wv: Tensor::uniform(&[c, c], lecun(c), &mut rng),
                bv: Tensor::zeros(&[c]),
                wo: Tensor::uniform(&[c, c], lecun(c), &mut rng),
                bo: Tensor::zeros(&[c]),
                ln2_gain: Tensor::filled(&[c], 1.0),
                ln2_bias: Tensor::zeros(&[c]),
                w1: Tensor::uniform(&[f, c], kaiming(c), &mut rng),
                b1: Tensor::zeros(&[f]),
                w2: Tensor::uniform(&[c, f], lecun(f), &mut rng),
                b2: Tensor::zeros(&[c]),
            })
            .collect();
        let head = HeadParams {
            norm_gain: Tensor::filled(&[c], 1.0),
            norm_bias: Tensor::zeros(&[c]),
            weight: Tensor::uniform(&[OUTPUTS, c], lecun(c), &mut rng),
            bias: Tensor::zeros(&[OUTPUTS]),
        };
        Self {
            config,
            blocks,
            layers,
            head,
        }
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Tensors with stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in [
                ("dw_weight", &b.dw_weight),
                ("dw_bias", &b.dw_bias),
                ("group_weight", &b.group_weight),
                ("scale", &b.scale),
                ("shift", &b.shift),
            ] {
                out.push((format!("aggregator.{i}.{n}"), t));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("encoder.{i}.{n}"), t));
            }
        }
        let h = &self.head;
        for (n, t) in [
            ("norm_gain", &h.norm_gain),
            ("norm_bias", &h.norm_bias),
            ("weight", &h.weight),
            ("bias", &h.bias),
        ] {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in self.blocks.iter_mut() {
            out.extend([
                &mut b.dw_weight,
                &mut b.dw_bias,
                &mut b.group_weight,
                &mut b.scale,
                &mut b.shift,
            ]);
        }
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        let h = &mut self.head;
        out.extend([&mut h.norm_gain, &mut h.norm_bias, &mut h.weight, &mut h.bias]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of every coordinate, in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter().copied())
            .collect()
    }

    /// Mutable access to flat coordinate `index`.
    pub fn coord_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t.data[index];
            }
            index -= t.len();
        }
        panic!("coordinate out of range");
    }

    /// `self += alpha * other`, coordinate-wise.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.named_tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data.iter_mut().zip(&s.data) {
                *d += alpha * v;
            }
        }
    }
}
