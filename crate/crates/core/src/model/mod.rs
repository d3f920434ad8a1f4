//! Attention-MIL network: per-slice encoder, pooling over the slice axis,
//! a linear disease head and a gender head behind a gradient reversal layer.

mod probe;

pub use probe::gender_probe;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{gradient_check, Activation, GradCheckReport, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::losses::{focal_smooth_loss, gender_loss, total_loss, LossConfig};
use crate::tensor::Tensor;
use crate::N_CLASSES;

/// Parameter-name prefix of the slice encoder.
pub const ENCODER: &str = "encoder.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Attention,
    Mean,
    Max,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Attention => "attention",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Pooling::Attention),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(Error::Config(format!(
                "pooling must be attention|mean|max, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilConfig {
    pub input_dim: usize,
    /// Encoder output width `D`.
    pub embed_dim: usize,
    pub attn_hidden: usize,
    pub lambda_adv: f64,
    /// Slice cap `M`.
    pub max_slices: usize,
    pub pooling: Pooling,
    pub activation: Activation,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            embed_dim: 32,
            attn_hidden: 128,
            lambda_adv: 0.1,
            max_slices: 32,
            pooling: Pooling::Attention,
            activation: Activation::Tanh,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.attn_hidden == 0 {
            return Err(Error::Config(
                "input_dim, embed_dim and attn_hidden must be >= 1".into(),
            ));
        }
        if self.max_slices == 0 {
            return Err(Error::Config("max_slices must be >= 1".into()));
        }
        if !self.lambda_adv.is_finite() || self.lambda_adv < 0.0 {
            return Err(Error::Config(format!(
                "lambda_adv must be finite and >= 0, got {}",
                self.lambda_adv
            )));
        }
        Ok(())
    }

    pub fn gender_hidden(&self) -> usize {
        (self.embed_dim / 2).max(1)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("input_dim", self.input_dim);
        doc.set("embed_dim", self.embed_dim);
        doc.set("attn_hidden", self.attn_hidden);
        doc.set("lambda_adv", self.lambda_adv);
        doc.set("max_slices", self.max_slices);
        doc.set("pooling", self.pooling.name());
        doc.set("activation", self.activation.name());
    }

    pub fn take_kv(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.take_into("input_dim", &mut self.input_dim)?;
        doc.take_into("embed_dim", &mut self.embed_dim)?;
        doc.take_into("attn_hidden", &mut self.attn_hidden)?;
        doc.take_into("lambda_adv", &mut self.lambda_adv)?;
        doc.take_into("max_slices", &mut self.max_slices)?;
        doc.take_into("pooling", &mut self.pooling)?;
        if let Some(a) = doc.take_str("activation") {
            self.activation = Activation::parse(&a)
                .ok_or_else(|| Error::Config(format!("activation must be tanh|gelu, got {a:?}")))?;
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter, in store order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (i, d, a, g) = (
            self.input_dim,
            self.embed_dim,
            self.attn_hidden,
            self.gender_hidden(),
        );
        let mut v = vec![
            ("encoder.w1", vec![i, d]),
            ("encoder.b1", vec![d]),
            ("encoder.w2", vec![d, d]),
            ("encoder.b2", vec![d]),
        ];
        if self.pooling == Pooling::Attention {
            v.extend([
                ("attention.w1", vec![d, a]),
                ("attention.b1", vec![a]),
                ("attention.w2", vec![a, 1]),
                ("attention.b2", vec![1]),
            ]);
        }
        v.extend([
            ("disease.w", vec![d, N_CLASSES]),
            ("disease.b", vec![N_CLASSES]),
            ("gender.w1", vec![d, g]),
            ("gender.b1", vec![g]),
            ("gender.w2", vec![g, 2]),
            ("gender.b2", vec![2]),
        ]);
        v.into_iter().map(|(n, s)| (n.to_string(), s)).collect()
    }
}

/// Forward results of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    pub disease_logits: [f64; N_CLASSES],
    pub gender_logits: [f64; 2],
    /// Per-slice pooling weights, zero at padded positions. For max pooling
    /// this is the share of embedding dimensions each slice wins.
    pub attention: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Tape handles of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ScanGraph {
    pub slices: Var,
    pub embeddings: Var,
    pub pooled: Var,
    pub weights: Vec<f64>,
    pub disease_logits: Var,
    pub gender_logits: Var,
}

#[derive(Clone, Debug)]
pub struct LossGraph {
    pub scan: ScanGraph,
    pub disease: Var,
    pub gender: Var,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct MilModel {
    pub config: MilConfig,
    pub params: ParamStore,
}

impl MilModel {
    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new(config: MilConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1])
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Tensor::new(&shape, data)?
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t)?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: MilConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Invalid(format!(
                "config expects {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(p) if p.value.shape() == shape.as_slice() => {}
                Some(p) => {
                    return Err(Error::Invalid(format!(
                        "parameter {name} has shape {:?}, config expects {shape:?}",
                        p.value.shape()
                    )))
                }
                None => return Err(Error::Invalid(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn mlp(
        &self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        hidden_act: bool,
    ) -> Result<Var> {
        let p = |s: &str| format!("{prefix}.{s}");
        let w1 = tape.param(&self.params, &p("w1"))?;
        let b1 = tape.param(&self.params, &p("b1"))?;
        let w2 = tape.param(&self.params, &p("w2"))?;
        let b2 = tape.param(&self.params, &p("b2"))?;
        let z = tape.linear(x, w1, b1)?;
        let z = if hidden_act {
            tape.activation(z, self.config.activation)
        } else {
            z
        };
        tape.linear(z, w2, b2)
    }

    fn check_bag(&self, features: &Tensor, mask: &[bool]) -> Result<()> {
        let (m, d) = features.dims2();
        if features.rank() != 2 || d != self.config.input_dim || m != mask.len() {
            return Err(Error::shape(
                "encode_slices",
                format!(
                    "features {:?} with mask of {} for input_dim {}",
                    features.shape(),
                    mask.len(),
                    self.config.input_dim
                ),
            ));
        }
        if !mask.iter().any(|&v| v) {
            return Err(Error::EmptyMask { op: "encode_slices" });
        }
        Ok(())
    }

    /// `h_i = W2 act(W1 x_i + b1) + b2` for every row, padded rows included.
    pub fn encode_slices(&self, tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_bag(tape.value(x), mask)?;
        self.mlp(tape, x, "encoder", true)
    }

    /// Pools slice embeddings into the scan embedding `H` and reports the
    /// per-slice weights.
    pub fn pool(&self, tape: &mut Tape, h: Var, mask: &[bool]) -> Result<(Var, Vec<f64>)> {
        let (m, d) = tape.value(h).dims2();
        if mask.len() != m {
            return Err(Error::shape("pool", format!("{m} rows vs mask of {}", mask.len())));
        }
        if !mask.iter().any(|&v| v) {
            return Err(Error::EmptyMask { op: "pool" });
        }
        match self.config.pooling {
            Pooling::Attention => {
                let scores = self.mlp(tape, h, "attention", true)?;
                let w = tape.masked_softmax(scores, mask)?;
                let pooled = tape.weighted_sum(w, h)?;
                let weights = tape.value(w).data().to_vec();
                Ok((pooled, weights))
            }
            Pooling::Mean => {
                let pooled = tape.masked_mean(h, mask)?;
                let n = mask.iter().filter(|&&v| v).count() as f64;
                let weights = mask.iter().map(|&v| if v { 1.0 / n } else { 0.0 }).collect();
                Ok((pooled, weights))
            }
            Pooling::Max => {
                let pooled = tape.masked_max(h, mask)?;
                let mut wins = vec![0usize; m];
                for &row in tape.max_argmax(pooled).expect("max node") {
                    wins[row] += 1;
                }
                let weights = wins.iter().map(|&k| k as f64 / d as f64).collect();
                Ok((pooled, weights))
            }
        }
    }

    /// Records the full forward pass: encoder, pooling, disease head, and
    /// the gender head behind a reversal layer scaled by `lambda_adv`.
    pub fn forward_graph(&self, tape: &mut Tape, features: &Tensor, mask: &[bool]) -> Result<ScanGraph> {
        self.check_bag(features, mask)?;
        let x = tape.constant(features.clone());
        let h = self.encode_slices(tape, x, mask)?;
        let (pooled, weights) = self.pool(tape, h, mask)?;
        let w = tape.param(&self.params, "disease.w")?;
        let b = tape.param(&self.params, "disease.b")?;
        let disease_logits = tape.linear(pooled, w, b)?;
        let reversed = tape.grl(pooled, self.config.lambda_adv);
        let gender_logits = self.mlp(tape, reversed, "gender", true)?;
        Ok(ScanGraph {
            slices: x,
            embeddings: h,
            pooled,
            weights,
            disease_logits,
            gender_logits,
        })
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, features: &Tensor, mask: &[bool]) -> Result<ScanOutput> {
        let mut tape = Tape::new();
        let g = self.forward_graph(&mut tape, features, mask)?;
        Ok(Self::output(&tape, &g))
    }

    pub fn output(tape: &Tape, g: &ScanGraph) -> ScanOutput {
        let dz = tape.value(g.disease_logits).data();
        let gz = tape.value(g.gender_logits).data();
        ScanOutput {
            disease_logits: [dz[0], dz[1], dz[2], dz[3]],
            gender_logits: [gz[0], gz[1]],
            attention: g.weights.clone(),
            embedding: tape.value(g.pooled).data().to_vec(),
        }
    }

    /// Central-difference audit of the loss gradients on one bag: the disease
    /// loss against every trainable parameter and the gender loss against the
    /// gender head. Entries are named `disease:<param>` and `gender:<param>`.
    #[allow(clippy::too_many_arguments)]
    pub fn check_loss_gradients(
        &self,
        features: &Tensor,
        mask: &[bool],
        label: usize,
        gender: usize,
        loss_cfg: &LossConfig,
        h: f64,
        tol: f64,
    ) -> Result<GradCheckReport> {
        let mut entries = Vec::new();
        for which in ["disease", "gender"] {
            let report = gradient_check(
                |tape, ps| {
                    let model = MilModel {
                        config: self.config.clone(),
                        params: ps.clone(),
                    };
                    let g = model.loss_graph(tape, features, mask, label, gender, loss_cfg)?;
                    Ok(if which == "disease" { g.disease } else { g.gender })
                },
                &self.params,
                h,
                tol,
            )?;
            entries.extend(
                report
                    .entries
                    .into_iter()
                    .filter(|e| which == "disease" || e.param.starts_with("gender."))
                    .map(|mut e| {
                        e.param = format!("{which}:{}", e.param);
                        e
                    }),
            );
        }
        let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
        Ok(GradCheckReport {
            entries,
            max_rel_error,
            tol,
        })
    }

    /// Forward pass plus `L = L_disease + w * L_gender`.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        mask: &[bool],
        label: usize,
        gender: usize,
        loss_cfg: &LossConfig,
    ) -> Result<LossGraph> {
        let scan = self.forward_graph(tape, features, mask)?;
        let disease = focal_smooth_loss(tape, scan.disease_logits, label, loss_cfg)?;
        let gender = gender_loss(tape, scan.gender_logits, gender)?;
        let total = total_loss(tape, disease, gender, loss_cfg.gender_weight())?;
        Ok(LossGraph {
            scan,
            disease,
            gender,
            total,
        })
    }
}
