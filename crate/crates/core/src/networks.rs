//! Shared encoder, K-way class predictor, and 2K-way joint domain-class
//! predictor, with parameters partitioned into three disjoint groups so the
//! trainer can route updates selectively.
//!
//! The desk-scale architecture is an MLP: linear layers with leaky-ReLU
//! activations in the encoder, plain linear heads followed by softmax. The
//! method itself is architecture-agnostic.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{add_bias_into, leaky_relu_into, matmul_into, softmax_rows_into, Tensor};

/// Magic bytes of the parameter file format.
pub const PARAM_MAGIC: &[u8; 5] = b"CALN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    ClassHead,
    JointHead,
}

/// Network shape: encoder layer widths (the last one is the feature
/// dimension), class count, and the leaky-ReLU slope.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub d_in: usize,
    /// Encoder layer output widths; the last entry is the feature dimension.
    pub enc_widths: Vec<usize>,
    pub k: usize,
    /// Hidden widths of the class predictor head; empty = linear head.
    pub class_head_widths: Vec<usize>,
    /// Hidden widths of the joint predictor head; empty = linear head.
    pub joint_head_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Apply the activation after the final encoder layer too. Tests that
    /// need a purely linear encoder turn this off.
    pub activate_last: bool,
    /// Dropout probability on encoder activations during training; 0 = off.
    pub dropout: f64,
}

impl Arch {
    pub fn new(d_in: usize, enc_widths: Vec<usize>, k: usize) -> Result<Self> {
        let arch = Arch {
            d_in,
            enc_widths,
            k,
            class_head_widths: Vec::new(),
            joint_head_widths: Vec::new(),
            leaky_slope: 0.1,
            activate_last: true,
            dropout: 0.0,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("arch", "class count K must be at least 2"));
        }
        if self.d_in == 0 || self.enc_widths.is_empty() || self.enc_widths.contains(&0) {
            return Err(Error::invalid("arch", "layer widths must be positive"));
        }
        if self.class_head_widths.contains(&0) || self.joint_head_widths.contains(&0) {
            return Err(Error::invalid("arch", "head widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("arch", "dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn d_feat(&self) -> usize {
        *self.enc_widths.last().unwrap()
    }

    /// (fan_in, fan_out) per encoder layer.
    fn enc_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.enc_widths.len());
        let mut prev = self.d_in;
        for &w in &self.enc_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    /// (fan_in, fan_out) per layer of one head, ending at `out_dim`.
    pub(crate) fn head_dims(&self, group: ParamGroup, out_dim: usize) -> Vec<(usize, usize)> {
        let widths = match group {
            ParamGroup::ClassHead => &self.class_head_widths,
            ParamGroup::JointHead => &self.joint_head_widths,
            ParamGroup::Encoder => unreachable!("encoder has no head dims"),
        };
        let mut dims = Vec::with_capacity(widths.len() + 1);
        let mut prev = self.d_feat();
        for &w in widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, out_dim));
        dims
    }
}

/// One prediction batch: pre-softmax logits and the softmax simplex rows.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Network parameters partitioned into encoder / class head / joint head.
/// Each group is a flat list `[W0, b0, W1, b1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arch: Arch,
    pub encoder: Vec<Tensor>,
    pub class_head: Vec<Tensor>,
    pub joint_head: Vec<Tensor>,
}

fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

impl ParamSet {
    /// Seeded initialization: weights uniform in `[-a, a]` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        for (fan_in, fan_out) in arch.enc_dims() {
            encoder.push(glorot_uniform(&mut rng, fan_in, fan_out));
            encoder.push(Tensor::zeros(vec![fan_out]));
        }
        let mut class_head = Vec::new();
        for (fan_in, fan_out) in arch.head_dims(ParamGroup::ClassHead, arch.k) {
            class_head.push(glorot_uniform(&mut rng, fan_in, fan_out));
            class_head.push(Tensor::zeros(vec![fan_out]));
        }
        let mut joint_head = Vec::new();
        for (fan_in, fan_out) in arch.head_dims(ParamGroup::JointHead, 2 * arch.k) {
            joint_head.push(glorot_uniform(&mut rng, fan_in, fan_out));
            joint_head.push(Tensor::zeros(vec![fan_out]));
        }
        Ok(ParamSet {
            arch,
            encoder,
            class_head,
            joint_head,
        })
    }

    pub fn group(&self, g: ParamGroup) -> &[Tensor] {
        match g {
            ParamGroup::Encoder => &self.encoder,
            ParamGroup::ClassHead => &self.class_head,
            ParamGroup::JointHead => &self.joint_head,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<Tensor> {
        match g {
            ParamGroup::Encoder => &mut self.encoder,
            ParamGroup::ClassHead => &mut self.class_head,
            ParamGroup::JointHead => &mut self.joint_head,
        }
    }

    /// Canonical tape-leaf names for one group, in group storage order.
    pub fn group_names(arch: &Arch, g: ParamGroup) -> Vec<String> {
        match g {
            ParamGroup::Encoder => {
                let mut names = Vec::new();
                for i in 0..arch.enc_widths.len() {
                    names.push(format!("enc{i}.w"));
                    names.push(format!("enc{i}.b"));
                }
                names
            }
            ParamGroup::ClassHead => (0..=arch.class_head_widths.len())
                .flat_map(|i| [format!("hc{i}.w"), format!("hc{i}.b")])
                .collect(),
            ParamGroup::JointHead => (0..=arch.joint_head_widths.len())
                .flat_map(|i| [format!("hj{i}.w"), format!("hj{i}.b")])
                .collect(),
        }
    }

    /// All `(name, tensor)` pairs, for binding a parameter set to a tape.
    pub fn bindings(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for g in [ParamGroup::Encoder, ParamGroup::ClassHead, ParamGroup::JointHead] {
            for (name, t) in Self::group_names(&self.arch, g).into_iter().zip(self.group(g)) {
                out.push((name, t));
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.encoder
            .iter()
            .chain(&self.class_head)
            .chain(&self.joint_head)
            .map(Tensor::numel)
            .sum()
    }

    /// Encoder output `z` for a batch `x` of shape `[n, d_in]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.arch.d_in {
            return Err(Error::shape(
                "encode",
                &[x.rows(), self.arch.d_in],
                x.shape(),
            ));
        }
        let n = x.shape()[0];
        let n_layers = self.arch.enc_widths.len();
        let mut cur = x.clone();
        for layer in 0..n_layers {
            let w = &self.encoder[2 * layer];
            let b = &self.encoder[2 * layer + 1];
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let mut lin = Tensor::zeros(vec![n, fan_out]);
            matmul_into(n, fan_in, fan_out, cur.data(), w.data(), lin.data_mut());
            let mut biased = Tensor::zeros(vec![n, fan_out]);
            add_bias_into(n, fan_out, lin.data(), b.data(), biased.data_mut());
            if layer + 1 < n_layers || self.arch.activate_last {
                let mut act = Tensor::zeros(vec![n, fan_out]);
                leaky_relu_into(biased.data(), self.arch.leaky_slope, act.data_mut());
                cur = act;
            } else {
                cur = biased;
            }
        }
        Ok(cur)
    }

    fn head_predict(&self, z: &Tensor, head: &[Tensor], out_dim: usize) -> Result<Prediction> {
        let d_feat = self.arch.d_feat();
        if z.shape().len() != 2 || z.shape()[1] != d_feat {
            return Err(Error::shape("head_predict", &[z.rows(), d_feat], z.shape()));
        }
        let n = z.shape()[0];
        let n_layers = head.len() / 2;
        let mut cur = z.clone();
        for layer in 0..n_layers {
            let w = &head[2 * layer];
            let b = &head[2 * layer + 1];
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let mut lin = Tensor::zeros(vec![n, fan_out]);
            matmul_into(n, fan_in, fan_out, cur.data(), w.data(), lin.data_mut());
            let mut biased = Tensor::zeros(vec![n, fan_out]);
            add_bias_into(n, fan_out, lin.data(), b.data(), biased.data_mut());
            if layer + 1 < n_layers {
                let mut act = Tensor::zeros(vec![n, fan_out]);
                leaky_relu_into(biased.data(), self.arch.leaky_slope, act.data_mut());
                cur = act;
            } else {
                cur = biased;
            }
        }
        let logits = cur;
        let mut probs = Tensor::zeros(vec![n, out_dim]);
        softmax_rows_into(n, out_dim, logits.data(), probs.data_mut());
        Ok(Prediction { logits, probs })
    }

    /// K-way class prediction from features.
    pub fn class_predict(&self, z: &Tensor) -> Result<Prediction> {
        self.head_predict(z, &self.class_head, self.arch.k)
    }

    /// 2K-way joint domain-class prediction from features. The first K slots
    /// are the source classes, the last K the target classes.
    pub fn joint_predict(&self, z: &Tensor) -> Result<Prediction> {
        self.head_predict(z, &self.joint_head, 2 * self.arch.k)
    }

    // -- flat binary parameter file: header (magic, arch integers), then
    //    64-bit little-endian reals in group order encoder, class, joint. --

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(PARAM_MAGIC);
        let header: Vec<u32> = [
            self.arch.d_in as u32,
            self.arch.k as u32,
            self.arch.activate_last as u32,
            self.arch.enc_widths.len() as u32,
        ]
        .into_iter()
        .chain(self.arch.enc_widths.iter().map(|&w| w as u32))
        .chain([self.arch.class_head_widths.len() as u32])
        .chain(self.arch.class_head_widths.iter().map(|&w| w as u32))
        .chain([self.arch.joint_head_widths.len() as u32])
        .chain(self.arch.joint_head_widths.iter().map(|&w| w as u32))
        .collect();
        for v in header {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.arch.leaky_slope, self.arch.dropout] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.encoder.iter().chain(&self.class_head).chain(&self.joint_head) {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut pos = 0usize;
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::invalid("param file", "truncated"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        }
        fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
            Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
        }
        fn read_f64(bytes: &[u8], pos: &mut usize) -> Result<f64> {
            Ok(f64::from_le_bytes(take(bytes, pos, 8)?.try_into().unwrap()))
        }
        if take(&bytes, &mut pos, 5)? != PARAM_MAGIC {
            return Err(Error::invalid("param file", "bad magic"));
        }
        let d_in = read_u32(&bytes, &mut pos)? as usize;
        let k = read_u32(&bytes, &mut pos)? as usize;
        let activate_last = read_u32(&bytes, &mut pos)? != 0;
        let n_layers = read_u32(&bytes, &mut pos)? as usize;
        let mut enc_widths = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            enc_widths.push(read_u32(&bytes, &mut pos)? as usize);
        }
        let n_class_head = read_u32(&bytes, &mut pos)? as usize;
        let mut class_head_widths = Vec::with_capacity(n_class_head);
        for _ in 0..n_class_head {
            class_head_widths.push(read_u32(&bytes, &mut pos)? as usize);
        }
        let n_joint_head = read_u32(&bytes, &mut pos)? as usize;
        let mut joint_head_widths = Vec::with_capacity(n_joint_head);
        for _ in 0..n_joint_head {
            joint_head_widths.push(read_u32(&bytes, &mut pos)? as usize);
        }
        let leaky_slope = read_f64(&bytes, &mut pos)?;
        let dropout = read_f64(&bytes, &mut pos)?;
        let arch = Arch {
            d_in,
            enc_widths,
            k,
            class_head_widths,
            joint_head_widths,
            leaky_slope,
            activate_last,
            dropout,
        };
        arch.validate()?;

        let mut params = ParamSet::init(arch, 0)?;
        for t in params
            .encoder
            .iter_mut()
            .chain(&mut params.class_head)
            .chain(&mut params.joint_head)
        {
            for v in t.data_mut() {
                *v = read_f64(&bytes, &mut pos)?;
            }
        }
        if pos != bytes.len() {
            return Err(Error::invalid("param file", "trailing bytes"));
        }
        Ok(params)
    }
}

/// Index of the argmax entry; ties go to the lowest index, which keeps
/// pseudo-labels reproducible.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Hard pseudo-label for one class-probability row: the one-hot vector at
/// the argmax. No gradient flows through this (it is recomputed from plain
/// values each step).
pub fn pseudo_label(probs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    out[argmax(probs)] = 1.0;
    out
}

/// Row-wise pseudo-labels for a prediction batch, as a one-hot matrix.
pub fn pseudo_labels(pred: &Prediction) -> Tensor {
    let (n, k) = (pred.probs.rows(), pred.probs.cols());
    let mut out = Tensor::zeros(vec![n, k]);
    for i in 0..n {
        let j = argmax(pred.probs.row(i));
        out.data_mut()[i * k + j] = 1.0;
    }
    out
}
