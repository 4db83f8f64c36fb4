//! L-infinity PGD against a differentiable surface.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::models::{Model, NormMode, Trainable};
use crate::seed::StreamRng;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Parse `"8/255"`, `"0.03"` or `"0"`.
pub fn parse_fraction(s: &str) -> Result<Real> {
    let bad = || Error::Config(format!("cannot parse {s:?} as a number or fraction"));
    let v = match s.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            if d == 0.0 {
                return Err(bad());
            }
            n / d
        }
        None => s.trim().parse::<f64>().map_err(|_| bad())?,
    };
    if !v.is_finite() {
        return Err(bad());
    }
    Ok(v as Real)
}

pub(crate) fn de_fraction<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Real, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v as Real),
        Raw::Text(s) => parse_fraction(&s).map_err(serde::de::Error::custom),
    }
}

/// Quantity the attacker maximizes, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// `-cos(f(x_adv), target)`.
    CosineToTarget,
    /// `-cos(f(x_adv), f(x))` with the clean features held fixed.
    CosineToClean,
    /// Cross-entropy of the classifier logits.
    CrossEntropy,
}

/// Fixed inputs an objective needs besides the model output.
#[derive(Clone, Debug)]
pub enum ObjectiveContext {
    Targets(Tensor),
    Clean(Tensor),
    Labels(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(deserialize_with = "de_fraction")]
    pub epsilon: Real,
    #[serde(deserialize_with = "de_fraction")]
    pub alpha: Real,
    pub steps: usize,
    pub restarts: usize,
    pub random_start: bool,
    pub objective: ObjectiveKind,
}

impl AttackConfig {
    /// The inner attack used while distilling.
    pub fn training() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 5,
            restarts: 1,
            random_start: false,
            objective: ObjectiveKind::CosineToTarget,
        }
    }

    /// PGD-20 with cross-entropy, used for reported robust accuracy.
    pub fn evaluation() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 20,
            restarts: 1,
            random_start: true,
            objective: ObjectiveKind::CrossEntropy,
        }
    }

    /// Stronger stand-in for an ensemble attack: PGD-50, five restarts.
    pub fn aa_proxy() -> Self {
        Self {
            steps: 50,
            restarts: 5,
            ..Self::evaluation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything PGD can climb: per-sample objective values and the input gradient
/// of their sum.
pub trait AttackSurface {
    fn value_and_grad(&mut self, x: &Tensor) -> Result<(Vec<Real>, Tensor)>;

    fn values(&mut self, x: &Tensor) -> Result<Vec<Real>> {
        Ok(self.value_and_grad(x)?.0)
    }
}

/// Per-sample cross-entropy `[B,K] -> [B]`.
pub fn cross_entropy_rows(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::shape("cross_entropy", format!("label {bad} >= {} classes", shape[1])));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.gather_last(lp, labels)?;
    tape.scale(picked, -1.0)
}

/// Per-sample objective `[B]` for the model output `out`.
pub fn objective_value(tape: &mut Tape, kind: ObjectiveKind, out: Var, ctx: &ObjectiveContext) -> Result<Var> {
    match (kind, ctx) {
        (ObjectiveKind::CosineToTarget, ObjectiveContext::Targets(t))
        | (ObjectiveKind::CosineToClean, ObjectiveContext::Clean(t)) => {
            let t = tape.constant(t.clone());
            let c = tape.cosine_rows(out, t)?;
            tape.scale(c, -1.0)
        }
        (ObjectiveKind::CrossEntropy, ObjectiveContext::Labels(y)) => cross_entropy_rows(tape, out, y),
        (ObjectiveKind::CosineToTarget, _) => Err(Error::MissingContext("targets")),
        (ObjectiveKind::CosineToClean, _) => Err(Error::MissingContext("clean features")),
        (ObjectiveKind::CrossEntropy, _) => Err(Error::MissingContext("labels")),
    }
}

/// Which model output the objective reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Encoder,
    Projector,
    Classifier,
}

/// A model with frozen parameters seen as an attack surface.
pub struct ModelSurface<'a> {
    pub model: &'a Model,
    pub head: Head,
    pub norm: NormMode,
    pub kind: ObjectiveKind,
    pub ctx: &'a ObjectiveContext,
}

impl<'a> ModelSurface<'a> {
    pub fn new(model: &'a Model, head: Head, norm: NormMode, kind: ObjectiveKind, ctx: &'a ObjectiveContext) -> Self {
        Self {
            model,
            head,
            norm,
            kind,
            ctx,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.model.bind(tape, &Trainable::None);
        let pass = self.model.encode(tape, &bound, x, self.norm)?;
        let out = match self.head {
            Head::Encoder => pass.reps,
            Head::Projector => self.model.project(tape, &bound, pass.reps)?,
            Head::Classifier => self.model.classify(tape, &bound, pass.reps)?,
        };
        objective_value(tape, self.kind, out, self.ctx)
    }
}

impl AttackSurface for ModelSurface<'_> {
    fn value_and_grad(&mut self, x: &Tensor) -> Result<(Vec<Real>, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let per = self.forward(&mut tape, xv)?;
        let values = tape.value(per).data().to_vec();
        let total = tape.sum(per)?;
        let mut grads = tape.backward(total)?;
        let g = grads.take(xv).ok_or(Error::NonFinite("input gradient"))?;
        Ok((values, g))
    }

    fn values(&mut self, x: &Tensor) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let per = self.forward(&mut tape, xv)?;
        Ok(tape.value(per).data().to_vec())
    }
}

/// Result of [`pgd_with_values`].
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub x_adv: Tensor,
    /// Objective at `x_adv`, per sample.
    pub values: Vec<Real>,
}

/// Projected gradient ascent in the L-infinity ball around `x`, intersected
/// with `[0,1]`.
pub fn pgd(surface: &mut impl AttackSurface, x: &Tensor, cfg: &AttackConfig, rng: &mut StreamRng) -> Result<Tensor> {
    if cfg.restarts == 1 {
        cfg.validate()?;
        return single_run(surface, x, cfg, rng);
    }
    Ok(pgd_with_values(surface, x, cfg, rng)?.x_adv)
}

/// PGD that also reports the objective, keeping the best restart per sample.
pub fn pgd_with_values(
    surface: &mut impl AttackSurface,
    x: &Tensor,
    cfg: &AttackConfig,
    rng: &mut StreamRng,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    let mut best = single_run(surface, x, cfg, rng)?;
    let mut best_values = surface.values(&best)?;
    for _ in 1..cfg.restarts {
        let cand = single_run(surface, x, cfg, rng)?;
        let vals = surface.values(&cand)?;
        let row = x.row_len();
        for (i, (&v, b)) in vals.iter().zip(best_values.iter_mut()).enumerate() {
            if v > *b {
                *b = v;
                best.data_mut()[i * row..(i + 1) * row].copy_from_slice(cand.row(i));
            }
        }
    }
    Ok(PgdOutcome {
        x_adv: best,
        values: best_values,
    })
}

fn project(x: &[Real], adv: &mut [Real], eps: Real) {
    for (a, &c) in adv.iter_mut().zip(x) {
        *a = a.clamp(c - eps, c + eps).clamp(0.0, 1.0);
    }
}

fn single_run(surface: &mut impl AttackSurface, x: &Tensor, cfg: &AttackConfig, rng: &mut StreamRng) -> Result<Tensor> {
    let eps = cfg.epsilon;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    if cfg.random_start {
        for a in adv.data_mut() {
            *a += rng.gen_range(-eps..=eps);
        }
        project(x.data(), adv.data_mut(), eps);
    }
    for _ in 0..cfg.steps {
        let (_, g) = surface.value_and_grad(&adv)?;
        if !g.is_finite() {
            return Err(Error::NonFinite("attack gradient"));
        }
        for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
            if gv > 0.0 {
                *a += cfg.alpha;
            } else if gv < 0.0 {
                *a -= cfg.alpha;
            }
        }
        project(x.data(), adv.data_mut(), eps);
    }
    Ok(adv)
}

/// Linear model `f(x) = x·w` per sample, for checking the attack in isolation.
#[derive(Clone, Debug)]
pub struct LinearSurface {
    pub w: Vec<Real>,
}

impl AttackSurface for LinearSurface {
    fn value_and_grad(&mut self, x: &Tensor) -> Result<(Vec<Real>, Tensor)> {
        let n = x.row_len();
        if n != self.w.len() {
            return Err(Error::shape("linear_surface", format!("row {n} vs weight {}", self.w.len())));
        }
        let values = (0..x.rows()).map(|i| x.row(i).iter().zip(&self.w).map(|(a, b)| a * b).sum()).collect();
        let grad = self.w.iter().copied().cycle().take(x.numel()).collect();
        Ok((values, Tensor::new(x.shape().to_vec(), grad)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderConfig, ModelSpec, ProjectorConfig};
    use crate::seed::SeedStreams;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(eps: Real, alpha: Real, steps: usize, random_start: bool) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            alpha,
            steps,
            restarts: 1,
            random_start,
            objective: ObjectiveKind::CosineToTarget,
        }
    }

    #[test]
    fn fractions_parse() {
        assert!((parse_fraction("8/255").unwrap() - 8.0 / 255.0).abs() < 1e-9);
        assert_eq!(parse_fraction("0").unwrap(), 0.0);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("abc").is_err());
        let c: AttackConfig = serde_json::from_str(
            r#"{"epsilon":"8/255","alpha":0.01,"steps":3,"restarts":1,"random_start":false,"objective":"cross-entropy"}"#,
        )
        .unwrap();
        assert_eq!(c.steps, 3);
        assert_eq!(c.objective, ObjectiveKind::CrossEntropy);
    }

    #[test]
    fn linear_single_step_moves_by_alpha_sign() {
        let w = vec![0.5, -2.0, 0.0, 1.0];
        let x = Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap();
        let mut s = LinearSurface { w: w.clone() };
        let c = cfg(8.0 / 255.0, 2.0 / 255.0, 1, false);
        let adv = pgd(&mut s, &x, &c, &mut SeedStreams::new(0).stream("a")).unwrap();
        let expect = [0.5 + 2.0 / 255.0, 0.5 - 2.0 / 255.0, 0.5, 0.5 + 2.0 / 255.0];
        for (a, e) in adv.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.9, 1.0, 0.0]).unwrap();
        let mut s = LinearSurface { w: vec![1.0, -1.0, 1.0] };
        let c = cfg(0.0, 0.1, 10, true);
        let adv = pgd(&mut s, &x, &c, &mut SeedStreams::new(0).stream("a")).unwrap();
        assert!(adv.bit_eq(&x));
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = cfg(-0.1, 0.1, 1, false);
        assert!(c.validate().is_err());
        c.epsilon = 0.1;
        c.restarts = 0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn stays_in_ball_and_box(
            xs in proptest::collection::vec(0.0f64..=1.0, 6),
            ws in proptest::collection::vec(-3.0f64..3.0, 3),
            eps in 0.0f64..0.3,
            alpha in 0.0f64..0.2,
            steps in 0usize..6,
            rs in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let x = Tensor::new(vec![2, 3], xs.iter().map(|&v| v as Real).collect()).unwrap();
            let mut s = LinearSurface { w: ws.iter().map(|&v| v as Real).collect() };
            let c = cfg(eps as Real, alpha as Real, steps, rs);
            let adv = pgd(&mut s, &x, &c, &mut SeedStreams::new(seed).stream("p")).unwrap();
            for (a, o) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - o).abs() <= eps as Real + 1e-6);
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }

    fn tiny_model() -> Model {
        let spec = ModelSpec {
            encoder: EncoderConfig::tiny(1, 16, 16),
            projector: ProjectorConfig::disabled(),
            classes: Some(3),
        };
        Model::new(spec, &mut SeedStreams::new(3).stream("m")).unwrap()
    }

    fn inputs(n: usize) -> Tensor {
        let mut rng = SeedStreams::new(5).stream("x");
        Tensor::new(vec![n, 1, 16, 16], (0..n * 256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn model_attack_leaves_params_and_raises_loss() {
        let m = tiny_model();
        let before = m.hash();
        let x = inputs(4);
        let ctx = ObjectiveContext::Labels(vec![0, 1, 2, 0]);
        let mut s = ModelSurface::new(&m, Head::Classifier, NormMode::Running, ObjectiveKind::CrossEntropy, &ctx);
        let clean = s.values(&x).unwrap();
        let c = AttackConfig {
            objective: ObjectiveKind::CrossEntropy,
            ..cfg(8.0 / 255.0, 2.0 / 255.0, 5, false)
        };
        let out = pgd_with_values(&mut s, &x, &c, &mut SeedStreams::new(1).stream("a")).unwrap();
        assert_eq!(m.hash(), before);
        let gain: Real = out.values.iter().zip(&clean).map(|(a, b)| a - b).sum();
        assert!(gain > 0.0, "gain {gain}");
    }

    #[test]
    fn more_restarts_never_lower_objective() {
        let m = tiny_model();
        let x = inputs(3);
        let ctx = ObjectiveContext::Labels(vec![0, 1, 2]);
        let mut s = ModelSurface::new(&m, Head::Classifier, NormMode::Running, ObjectiveKind::CrossEntropy, &ctx);
        let mut c = AttackConfig {
            objective: ObjectiveKind::CrossEntropy,
            ..cfg(8.0 / 255.0, 2.0 / 255.0, 3, true)
        };
        let one = pgd_with_values(&mut s, &x, &c, &mut SeedStreams::new(9).stream("a")).unwrap();
        c.restarts = 3;
        let three = pgd_with_values(&mut s, &x, &c, &mut SeedStreams::new(9).stream("a")).unwrap();
        for (a, b) in three.values.iter().zip(&one.values) {
            assert!(a >= b);
        }
    }

    #[test]
    fn missing_context_is_an_error() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(vec![2, 3]));
        let ctx = ObjectiveContext::Labels(vec![0, 1]);
        assert!(matches!(
            objective_value(&mut tape, ObjectiveKind::CosineToTarget, v, &ctx),
            Err(Error::MissingContext(_))
        ));
    }
}
