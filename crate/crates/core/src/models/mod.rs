//! Encoder, projector head and linear classifier.
//!
//! The encoder is a stack of `conv3x3 -> normalize -> relu` blocks followed
//! by global average pooling and a linear map to the representation
//! dimension. All three components live in one [`Model`] whose parameters
//! are namespaced `encoder.*`, `projector.*` and `classifier.*`.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{is_buffer, Bound, ParamSet, Trainable};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Momentum of the running normalization statistics.
pub const NORM_MOMENTUM: Real = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    /// Stride (1 or 2) of each conv block.
    pub strides: Vec<usize>,
    pub rep_dim: usize,
}

impl EncoderConfig {
    /// Four blocks, stride 2 on every other block, 64-d representation.
    pub fn desk(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            widths: vec![16, 32, 32, 64],
            strides: vec![1, 2, 1, 2],
            rep_dim: 64,
        }
    }

    /// Narrow four-block encoder for 16x16 synthetic images; downsamples
    /// early so a full training run fits in seconds.
    pub fn tiny(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            widths: vec![8, 8, 16, 16],
            strides: vec![2, 1, 2, 1],
            rep_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rep_dim < 2 {
            return Err(Error::Config("representation dimension must be >= 2".into()));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be non-empty and >= 1".into()));
        }
        if self.widths.len() != self.strides.len() {
            return Err(Error::Config("one stride per encoder block".into()));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("strides must be 1 or 2".into()));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub enabled: bool,
    pub hidden: usize,
    pub output: usize,
}

impl ProjectorConfig {
    /// Hidden width `2d`, output width `d`.
    pub fn standard(rep_dim: usize) -> Self {
        Self {
            enabled: true,
            hidden: 2 * rep_dim,
            output: rep_dim,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            hidden: 0,
            output: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    /// Number of classes of the linear classifier, if attached.
    pub classes: Option<usize>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.projector.enabled && (self.projector.hidden == 0 || self.projector.output == 0) {
            return Err(Error::Config("projector widths must be >= 1".into()));
        }
        if let Some(k) = self.classes {
            if k < 2 {
                return Err(Error::Config(format!("classifier needs >= 2 classes, got {k}")));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes implied by the spec, in name order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let e = &self.encoder;
        let mut out = Vec::new();
        let mut c_in = e.in_channels;
        for (i, &w) in e.widths.iter().enumerate() {
            let p = format!("encoder.block{i}");
            out.push((format!("{p}.conv.weight"), vec![w, c_in, 3, 3]));
            out.push((format!("{p}.norm.weight"), vec![w]));
            out.push((format!("{p}.norm.bias"), vec![w]));
            out.push((format!("{p}.norm.running_mean"), vec![w]));
            out.push((format!("{p}.norm.running_var"), vec![w]));
            c_in = w;
        }
        out.push(("encoder.fc.weight".into(), vec![e.rep_dim, c_in]));
        out.push(("encoder.fc.bias".into(), vec![e.rep_dim]));
        if self.projector.enabled {
            let pr = &self.projector;
            out.push(("projector.fc1.weight".into(), vec![pr.hidden, e.rep_dim]));
            out.push(("projector.fc1.bias".into(), vec![pr.hidden]));
            out.push(("projector.fc2.weight".into(), vec![pr.output, pr.hidden]));
            out.push(("projector.fc2.bias".into(), vec![pr.output]));
        }
        if let Some(k) = self.classes {
            out.push(("classifier.weight".into(), vec![k, e.rep_dim]));
            out.push(("classifier.bias".into(), vec![k]));
        }
        out.sort();
        out
    }

    /// Trainable scalar count; a pure function of the spec.
    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with statistics of the current batch (training).
    Batch,
    /// Normalize with stored running statistics (evaluation).
    Running,
}

/// Output of [`Model::encode`].
pub struct EncoderPass {
    pub reps: Var,
    /// Normalization nodes, one per block, for running-stat updates.
    pub norm_nodes: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    pub params: ParamSet,
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: Real) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

fn init_entry(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let shape = shape.to_vec();
    if name.ends_with("running_var") || name.ends_with("norm.weight") {
        Tensor::full(shape, 1.0)
    } else if name.ends_with("bias") || name.ends_with("running_mean") {
        Tensor::zeros(shape)
    } else if name.ends_with("conv.weight") || name == "projector.fc1.weight" {
        // followed by relu
        uniform(rng, shape, (6.0 / fan_in as Real).sqrt())
    } else {
        uniform(rng, shape, (1.0 / fan_in as Real).sqrt())
    }
}

impl Model {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in spec.layout() {
            params.insert(name.clone(), init_entry(&name, &shape, rng));
        }
        Ok(Self { spec, params })
    }

    /// Wrap existing parameters, checking names and shapes against the spec.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        for (name, t) in params.iter() {
            match layout.iter().find(|(n, _)| n == name) {
                None => return Err(Error::Checkpoint(format!("unknown parameter {name}"))),
                Some((_, shape)) if shape.as_slice() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some((missing, _)) = layout.iter().find(|(n, _)| params.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("missing parameter {missing}")));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.spec.encoder
    }

    pub fn rep_dim(&self) -> usize {
        self.spec.encoder.rep_dim
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    /// Hash of the `encoder.*` tensors only.
    pub fn encoder_hash(&self) -> String {
        let mut p = ParamSet::new();
        for (n, t) in self.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
            p.insert(n, t.clone());
        }
        p.hash()
    }

    /// Copy holding only the encoder.
    pub fn encoder_only(&self) -> Model {
        let mut params = self.params.clone();
        params.remove_prefix("projector.");
        params.remove_prefix("classifier.");
        Model {
            spec: ModelSpec {
                encoder: self.spec.encoder.clone(),
                projector: ProjectorConfig::disabled(),
                classes: None,
            },
            params,
        }
    }

    /// Attach a freshly initialized projector (replacing any existing one).
    pub fn with_projector(mut self, cfg: ProjectorConfig, rng: &mut impl Rng) -> Result<Model> {
        self.params.remove_prefix("projector.");
        self.spec.projector = cfg;
        self.fill_missing(rng)?;
        Ok(self)
    }

    /// Attach a freshly initialized classifier (replacing any existing one).
    pub fn with_classifier(mut self, classes: usize, rng: &mut impl Rng) -> Result<Model> {
        self.params.remove_prefix("classifier.");
        self.spec.classes = Some(classes);
        self.fill_missing(rng)?;
        Ok(self)
    }

    fn fill_missing(&mut self, rng: &mut impl Rng) -> Result<()> {
        self.spec.validate()?;
        for (name, shape) in self.spec.layout() {
            if self.params.get(&name).is_none() {
                self.params.insert(name.clone(), init_entry(&name, &shape, rng));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: &Trainable) -> Bound {
        Bound::new(tape, &self.params, trainable)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.spec.encoder.input_shape();
        match shape {
            [_, c2, h2, w2] if (*c2, *h2, *w2) == (c, h, w) => Ok(()),
            _ => Err(Error::shape(
                "encoder_forward",
                format!("expected [B,{c},{h},{w}], got {shape:?}"),
            )),
        }
    }

    /// Encoder forward: `[B,C,H,W] -> [B,d]`.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: NormMode) -> Result<EncoderPass> {
        self.check_input(tape.shape(x))?;
        let e = &self.spec.encoder;
        let mut h = x;
        let mut norm_nodes = Vec::with_capacity(e.widths.len());
        for (i, &stride) in e.strides.iter().enumerate() {
            let p = format!("encoder.block{i}");
            h = tape.conv2d(h, bound.var(&format!("{p}.conv.weight")), stride)?;
            let (g, b) = (bound.var(&format!("{p}.norm.weight")), bound.var(&format!("{p}.norm.bias")));
            h = match mode {
                NormMode::Batch => tape.batch_norm(h, g, b)?,
                NormMode::Running => {
                    let mean = self.buffer(&format!("{p}.norm.running_mean"));
                    let var = self.buffer(&format!("{p}.norm.running_var"));
                    tape.running_norm(h, g, b, mean, var)?
                }
            };
            norm_nodes.push(h);
            h = tape.relu(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let reps = tape.linear(pooled, bound.var("encoder.fc.weight"), Some(bound.var("encoder.fc.bias")))?;
        Ok(EncoderPass { reps, norm_nodes })
    }

    fn buffer(&self, name: &str) -> &[Real] {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("buffer {name} missing"))
            .data()
    }

    /// Projector forward: `[B,d] -> [B,p]`, one hidden relu layer.
    pub fn project(&self, tape: &mut Tape, bound: &Bound, reps: Var) -> Result<Var> {
        if !self.spec.projector.enabled {
            return Err(Error::Config("projector is disabled".into()));
        }
        let h = tape.linear(reps, bound.var("projector.fc1.weight"), Some(bound.var("projector.fc1.bias")))?;
        let h = tape.relu(h)?;
        tape.linear(h, bound.var("projector.fc2.weight"), Some(bound.var("projector.fc2.bias")))
    }

    /// Linear classifier: `[B,d] -> [B,K]`.
    pub fn classify(&self, tape: &mut Tape, bound: &Bound, reps: Var) -> Result<Var> {
        if self.spec.classes.is_none() {
            return Err(Error::Config("no classifier attached".into()));
        }
        tape.linear(reps, bound.var("classifier.weight"), Some(bound.var("classifier.bias")))
    }

    /// Blend batch statistics from a `NormMode::Batch` pass into the running
    /// buffers. Running variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, tape: &Tape, pass: &EncoderPass) -> Result<()> {
        for (i, &node) in pass.norm_nodes.iter().enumerate() {
            let (mean, var) = tape
                .norm_stats(node)
                .ok_or_else(|| Error::Config("pass was not run with batch statistics".into()))?;
            let s = tape.shape(node);
            let count = (s[0] * s[2..].iter().product::<usize>()) as Real;
            let unbias = count / (count - 1.0).max(1.0);
            let p = format!("encoder.block{i}.norm");
            let rm = self.params.get_mut(&format!("{p}.running_mean")).expect("layout").data_mut();
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * m;
            }
            let rv = self.params.get_mut(&format!("{p}.running_var")).expect("layout").data_mut();
            for (r, v) in rv.iter_mut().zip(var) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Eval-mode representations, no gradient.
    pub fn represent(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &Trainable::None);
        let xv = tape.constant(x.clone());
        let pass = self.encode(&mut tape, &bound, xv, NormMode::Running)?;
        Ok(tape.value(pass.reps).clone())
    }

    /// Eval-mode projector outputs, no gradient.
    pub fn represent_projected(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &Trainable::None);
        let xv = tape.constant(x.clone());
        let pass = self.encode(&mut tape, &bound, xv, NormMode::Running)?;
        let z = self.project(&mut tape, &bound, pass.reps)?;
        Ok(tape.value(z).clone())
    }

    /// Eval-mode class logits, no gradient.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &Trainable::None);
        let xv = tape.constant(x.clone());
        let pass = self.encode(&mut tape, &bound, xv, NormMode::Running)?;
        let l = self.classify(&mut tape, &bound, pass.reps)?;
        Ok(tape.value(l).clone())
    }

    /// Eval-mode logits of the classifier alone applied to given features.
    pub fn classify_features(&self, feats: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &Trainable::None);
        let f = tape.constant(feats.clone());
        let l = self.classify(&mut tape, &bound, f)?;
        Ok(tape.value(l).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedStreams;

    fn spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig::tiny(1, 16, 16),
            projector: ProjectorConfig::standard(32),
            classes: Some(4),
        }
    }

    #[test]
    fn parameter_count_is_pure_function_of_spec() {
        let s = spec();
        let a = Model::new(s.clone(), &mut SeedStreams::new(1).stream("init")).unwrap();
        let b = Model::new(s.clone(), &mut SeedStreams::new(2).stream("init")).unwrap();
        assert_eq!(a.params.trainable_count(), s.parameter_count());
        assert_eq!(b.params.trainable_count(), s.parameter_count());
        // conv: 8*1*9 + 8*8*9 + 16*8*9 + 16*16*9, norms: 2*(8+8+16+16), fc: 32*16+32,
        // projector: 64*32+64 + 32*64+32, classifier: 4*32+4
        let expected = 72 + 576 + 1152 + 2304 + 96 + 544 + 2112 + 2080 + 132;
        assert_eq!(s.parameter_count(), expected);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec();
        s.encoder.rep_dim = 1;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.classes = Some(1);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.encoder.widths[1] = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let m = Model::new(spec(), &mut SeedStreams::new(1).stream("init")).unwrap();
        let x = Tensor::zeros(vec![2, 3, 16, 16]);
        assert!(matches!(m.represent(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn disabled_projector_errors() {
        let m = Model::new(spec(), &mut SeedStreams::new(1).stream("init"))
            .unwrap()
            .encoder_only();
        let x = Tensor::full(vec![1, 1, 16, 16], 0.5);
        assert!(matches!(m.represent_projected(&x), Err(Error::Config(_))));
    }
}
