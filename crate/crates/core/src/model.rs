//! The four autoencoder designs and parameter counting.
//!
//! | design | input          | decoder block | merge block |
//! |--------|----------------|---------------|-------------|
//! | A      | one per feature| capsule       | capsule     |
//! | B      | one per feature| LSTM          | LSTM        |
//! | C      | all features   | capsule       | none        |
//! | D      | all features   | LSTM          | none        |
//!
//! Every branch runs an LSTM encoder that keeps only its last hidden state,
//! repeats it `timesteps` times, and decodes with a block of width
//! `capsule_dim` (capsules: `timesteps` capsules of that width). Branched
//! designs concatenate branch outputs per timestep and pass them through a
//! merge block of width `n_features * capsule_dim`. A time-distributed dense
//! layer maps back to `n_features`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{
    capsule_forward, concat_features, dropout, lstm_sequence, repeat_vector, time_distributed_dense, CapsuleParams,
    DenseParams, LstmParams, LstmWeights, ModelRng, Routing, LSTM_PARAM_NAMES,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Design {
    A,
    B,
    C,
    D,
}

impl Design {
    pub const ALL: [Design; 4] = [Design::A, Design::B, Design::C, Design::D];

    pub fn is_branched(self) -> bool {
        matches!(self, Design::A | Design::B)
    }

    pub fn has_capsules(self) -> bool {
        matches!(self, Design::A | Design::C)
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Design::A => "A",
            Design::B => "B",
            Design::C => "C",
            Design::D => "D",
        };
        f.write_str(s)
    }
}

impl FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Design::A),
            "B" => Ok(Design::B),
            "C" => Ok(Design::C),
            "D" => Ok(Design::D),
            other => Err(Error::Config(format!("unknown design '{other}', expected A, B, C or D"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub design: Design,
    pub n_features: usize,
    pub timesteps: usize,
    /// Hidden width of each encoder LSTM.
    pub branch_width: usize,
    /// Stacked LSTM layers per encoder; all but the last return sequences.
    #[serde(default = "one")]
    pub encoder_layers: usize,
    /// Width of each decoder capsule, or hidden width of the replacing LSTM.
    pub capsule_dim: usize,
    pub routing: Routing,
    pub dropout_rate: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    /// Default hyperparameters: 64 timesteps, width 32, one encoder layer,
    /// dropout 0.2.
    pub fn new(design: Design, n_features: usize) -> Self {
        ModelSpec {
            design,
            n_features,
            timesteps: 64,
            branch_width: 32,
            encoder_layers: 1,
            capsule_dim: 32,
            routing: Routing::Uniform,
            dropout_rate: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_features == 0 {
            return bad("n_features must be at least 1".into());
        }
        if self.timesteps < 2 {
            return bad(format!("timesteps must be at least 2, got {}", self.timesteps));
        }
        if self.branch_width == 0 || self.capsule_dim == 0 {
            return bad("layer widths must be at least 1".into());
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    fn n_branches(&self) -> usize {
        if self.design.is_branched() {
            self.n_features
        } else {
            1
        }
    }

    fn branch_inputs(&self) -> usize {
        if self.design.is_branched() {
            1
        } else {
            self.n_features
        }
    }

    fn merged_width(&self) -> usize {
        self.n_branches() * self.capsule_dim
    }
}

/// Analytic trainable-parameter count.
pub fn count_parameters(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    let (t, h, c) = (spec.timesteps, spec.branch_width, spec.capsule_dim);
    let encoder = LstmParams::parameter_count(spec.branch_inputs(), h)
        + (spec.encoder_layers - 1) * LstmParams::parameter_count(h, h);
    let decoder = if spec.design.has_capsules() {
        CapsuleParams::parameter_count(t, t, h, c)
    } else {
        LstmParams::parameter_count(h, c)
    };
    let merged = spec.merged_width();
    let merge = match spec.design {
        Design::A => CapsuleParams::parameter_count(t, t, merged, merged),
        Design::B => LstmParams::parameter_count(merged, merged),
        Design::C | Design::D => 0,
    };
    Ok(spec.n_branches() * (encoder + decoder) + merge + DenseParams::parameter_count(merged, spec.n_features))
}

/// Reference quartet configuration: a branched capsule model with 25,635
/// trainable parameters (3 features, 4 timesteps, encoder width 7, capsule
/// width 12).
pub fn reference_spec() -> ModelSpec {
    ModelSpec {
        timesteps: 4,
        branch_width: 7,
        capsule_dim: 12,
        ..ModelSpec::new(Design::A, 3)
    }
}

/// Widths for `design` whose parameter count is closest to `target`.
///
/// Searches encoder and decoder widths up to `max_width`. Ties prefer equal
/// widths, then smaller models.
pub fn match_widths(base: &ModelSpec, design: Design, target: usize, max_width: usize) -> Result<ModelSpec> {
    let mut best: Option<(usize, usize, usize, ModelSpec)> = None;
    for h in 1..=max_width {
        for c in 1..=max_width {
            let spec = ModelSpec {
                design,
                branch_width: h,
                capsule_dim: c,
                ..base.clone()
            };
            let n = count_parameters(&spec)?;
            let key = (n.abs_diff(target), h.abs_diff(c), n);
            if best.as_ref().is_none_or(|b| key < (b.0, b.1, b.2)) {
                best = Some((key.0, key.1, key.2, spec));
            }
        }
    }
    best.map(|b| b.3).ok_or_else(|| Error::Config("max_width must be at least 1".into()))
}

/// All four designs with counts matched to `reference`, which must be design A.
pub fn matched_quartet(reference: &ModelSpec, max_width: usize) -> Result<[ModelSpec; 4]> {
    if reference.design != Design::A {
        return Err(Error::Config("the reference configuration must be design A".into()));
    }
    let target = count_parameters(reference)?;
    Ok([
        reference.clone(),
        match_widths(reference, Design::B, target, max_width)?,
        match_widths(reference, Design::C, target, max_width)?,
        match_widths(reference, Design::D, target, max_width)?,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Capsule(CapsuleParams),
    Lstm(LstmParams),
}

impl Block {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Block::Capsule(c) => vec![("weights", &c.weights)],
            Block::Lstm(l) => LSTM_PARAM_NAMES.into_iter().zip(l.tensors()).collect(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Block::Capsule(c) => vec![&mut c.weights],
            Block::Lstm(l) => l.tensors_mut().into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Block::Capsule(_) => "capsule",
            Block::Lstm(_) => "lstm",
        }
    }
}

/// `encoder` for the input-side layer, `encoder{k}` for the ones above it.
fn encoder_name(k: usize) -> String {
    if k == 0 {
        "encoder".to_string()
    } else {
        format!("encoder{k}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// Input feature columns, in order.
    pub features: Vec<usize>,
    /// Stacked encoder layers, input side first.
    pub encoder: Vec<LstmParams>,
    pub decoder: Block,
}

/// Forward-pass mode. Dropout is only active while training.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut ModelRng),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    branches: Vec<Branch>,
    merge: Option<Block>,
    dense: DenseParams,
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Model> {
        spec.validate()?;
        let mut rng = ModelRng::seed_from_u64(spec.seed);
        let (t, h, c) = (spec.timesteps, spec.branch_width, spec.capsule_dim);
        let feature_sets: Vec<Vec<usize>> = if spec.design.is_branched() {
            (0..spec.n_features).map(|f| vec![f]).collect()
        } else {
            vec![(0..spec.n_features).collect()]
        };
        let branches = feature_sets
            .into_iter()
            .map(|features| {
                let encoder = (0..spec.encoder_layers)
                    .map(|k| LstmParams::init(if k == 0 { features.len() } else { h }, h, &mut rng))
                    .collect();
                let decoder = if spec.design.has_capsules() {
                    Block::Capsule(CapsuleParams::init(t, t, h, c, spec.routing, &mut rng))
                } else {
                    Block::Lstm(LstmParams::init(h, c, &mut rng))
                };
                Branch {
                    features,
                    encoder,
                    decoder,
                }
            })
            .collect();
        let merged = spec.merged_width();
        let merge = match spec.design {
            Design::A => Some(Block::Capsule(CapsuleParams::init(t, t, merged, merged, spec.routing, &mut rng))),
            Design::B => Some(Block::Lstm(LstmParams::init(merged, merged, &mut rng))),
            Design::C | Design::D => None,
        };
        let dense = DenseParams::init(merged, spec.n_features, &mut rng);
        Ok(Model {
            spec: spec.clone(),
            branches,
            merge,
            dense,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn merge(&self) -> Option<&Block> {
        self.merge.as_ref()
    }

    /// Layer names in forward order.
    pub fn topology(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            for k in 0..b.encoder.len() {
                out.push(format!("branch{i}.{}:lstm", encoder_name(k)));
            }
            out.push(format!("branch{i}.repeat:{}", self.spec.timesteps));
            out.push(format!("branch{i}.decoder:{}", b.decoder.kind()));
        }
        if self.branches.len() > 1 {
            out.push("concat".to_string());
        }
        if let Some(m) = &self.merge {
            out.push(format!("merge:{}", m.kind()));
        }
        out.push("dense:time_distributed".to_string());
        out
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            for (k, layer) in b.encoder.iter().enumerate() {
                for (n, t) in LSTM_PARAM_NAMES.iter().zip(layer.tensors()) {
                    out.push((format!("branch{i}.{}.{n}", encoder_name(k)), t));
                }
            }
            for (n, t) in b.decoder.tensors() {
                out.push((format!("branch{i}.decoder.{n}"), t));
            }
        }
        if let Some(m) = &self.merge {
            for (n, t) in m.tensors() {
                out.push((format!("merge.{n}"), t));
            }
        }
        out.push(("dense.weight".to_string(), &self.dense.weight));
        out.push(("dense.bias".to_string(), &self.dense.bias));
        out
    }

    /// Same order as [`Model::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.branches {
            for layer in &mut b.encoder {
                out.extend(layer.tensors_mut());
            }
            out.extend(b.decoder.tensors_mut());
        }
        if let Some(m) = &mut self.merge {
            out.extend(m.tensors_mut());
        }
        out.push(&mut self.dense.weight);
        out.push(&mut self.dense.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Replaces every parameter, checking names and shapes against the
    /// current ones.
    pub fn set_parameters(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{n}' {:?} does not match expected '{en}' {es:?}",
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in self.parameters_mut().into_iter().zip(named) {
            *slot = t;
        }
        Ok(())
    }

    /// Registers all parameters on `g`, in [`Model::parameters`] order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.parameters().into_iter().map(|(_, t)| g.param(t.clone())).collect()
    }

    /// Builds the reconstruction of `x: [batch, T, F]` on `g` from bound
    /// parameter handles.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], x: Var, mut mode: Mode<'_>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let spec = &self.spec;
        if shape.len() != 3 || shape[1] != spec.timesteps || shape[2] != spec.n_features {
            return Err(Error::shape(format!(
                "model expects [batch, {}, {}], got {shape:?}",
                spec.timesteps, spec.n_features
            )));
        }
        if params.len() != self.parameters().len() {
            return Err(Error::contract("parameter handles do not match the model"));
        }
        let rate = spec.dropout_rate;
        let mut drop = |g: &mut Graph, v: Var| -> Result<Var> {
            match &mut mode {
                Mode::Inference => Ok(v),
                Mode::Training(rng) => dropout(g, v, rate, true, *rng),
            }
        };

        let mut cursor = 0;
        let mut take = |n: usize| {
            let s = &params[cursor..cursor + n];
            cursor += n;
            s
        };
        let mut outputs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let input = if branch.features.len() == spec.n_features {
                x
            } else {
                let parts: Vec<Var> = branch
                    .features
                    .iter()
                    .map(|&f| g.narrow(x, 2, f, 1))
                    .collect::<Result<_>>()?;
                g.concat(&parts, 2)?
            };
            let mut latent = input;
            for k in 0..branch.encoder.len() {
                let enc = LstmWeights::from_vars(g, take(8).try_into().expect("eight LSTM tensors"))?;
                let last = k + 1 == branch.encoder.len();
                latent = lstm_sequence(g, &enc, latent, !last)?;
                latent = drop(g, latent)?;
            }
            let repeated = repeat_vector(g, latent, spec.timesteps)?;
            let decoded = match &branch.decoder {
                Block::Capsule(c) => capsule_forward(g, take(1)[0], c.routing, repeated)?.capsules,
                Block::Lstm(_) => {
                    let dec = LstmWeights::from_vars(g, take(8).try_into().expect("eight LSTM tensors"))?;
                    let seq = lstm_sequence(g, &dec, repeated, true)?;
                    drop(g, seq)?
                }
            };
            outputs.push(decoded);
        }
        let mut merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            concat_features(g, &outputs)?
        };
        match &self.merge {
            Some(Block::Capsule(c)) => merged = capsule_forward(g, take(1)[0], c.routing, merged)?.capsules,
            Some(Block::Lstm(_)) => {
                let w = LstmWeights::from_vars(g, take(8).try_into().expect("eight LSTM tensors"))?;
                let seq = lstm_sequence(g, &w, merged, true)?;
                merged = drop(g, seq)?;
            }
            None => {}
        }
        let dense = take(2);
        time_distributed_dense(g, dense[0], dense[1], merged)
    }

    /// Reconstruction of `x: [batch, T, F]`.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, &params, xv, mode)?;
        Ok(g.value(y).clone())
    }

    /// Inference-mode forward over many windows, `chunk` at a time.
    pub fn reconstruct(&self, windows: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = windows.shape().first().copied().unwrap_or(0);
        if windows.rank() != 3 {
            return Err(Error::shape(format!("expected [N, T, F], got {:?}", windows.shape())));
        }
        let per = windows.numel() / n;
        let chunk = chunk.max(1);
        let mut data = Vec::with_capacity(windows.numel());
        for start in (0..n).step_by(chunk) {
            let len = chunk.min(n - start);
            let mut shape = windows.shape().to_vec();
            shape[0] = len;
            let part = Tensor::new(shape, windows.data()[start * per..(start + len) * per].to_vec())?;
            data.extend_from_slice(self.forward(&part, Mode::Inference)?.data());
        }
        Tensor::new(windows.shape().to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;
    use crate::testing::random_tensor;

    fn tiny(design: Design) -> ModelSpec {
        ModelSpec {
            timesteps: 4,
            branch_width: 3,
            capsule_dim: 3,
            dropout_rate: 0.0,
            seed: 1,
            ..ModelSpec::new(design, 2)
        }
    }

    #[test]
    fn lstm_and_capsule_counts_by_hand() {
        assert_eq!(LstmParams::parameter_count(1, 2), 32);
        assert_eq!(CapsuleParams::parameter_count(3, 4, 2, 2), 48);
    }

    #[test]
    fn reference_config_has_the_target_count() {
        assert_eq!(count_parameters(&reference_spec()).unwrap(), 25_635);
    }

    #[test]
    fn branched_designs_have_one_branch_per_feature() {
        let m = Model::build(&ModelSpec::new(Design::A, 3)).unwrap();
        assert_eq!(m.branches().len(), 3);
        for d in [Design::C, Design::D] {
            assert_eq!(Model::build(&tiny(d)).unwrap().branches().len(), 1);
        }
    }

    #[test]
    fn capsule_free_designs_hold_no_capsule_blocks() {
        for d in [Design::B, Design::D] {
            let m = Model::build(&tiny(d)).unwrap();
            assert!(m.branches().iter().all(|b| matches!(b.decoder, Block::Lstm(_))));
            assert!(!matches!(m.merge(), Some(Block::Capsule(_))));
        }
    }

    #[test]
    fn stacked_encoders_appear_in_topology_and_names() {
        let s = ModelSpec {
            encoder_layers: 3,
            ..tiny(Design::C)
        };
        let m = Model::build(&s).unwrap();
        assert_eq!(m.branches()[0].encoder.len(), 3);
        assert_eq!(m.branches()[0].encoder[1].input(), 3);
        assert_eq!(&m.topology()[..3], ["branch0.encoder:lstm", "branch0.encoder1:lstm", "branch0.encoder2:lstm"]);
        assert!(m.parameters().iter().any(|(n, _)| n == "branch0.encoder2.w_o"));
        let single = Model::build(&tiny(Design::C)).unwrap();
        assert_eq!(m.parameter_count() - single.parameter_count(), 2 * LstmParams::parameter_count(3, 3));
        let x = Tensor::zeros(&[2, 4, 2]);
        assert_eq!(m.forward(&x, Mode::Inference).unwrap().shape(), &[2, 4, 2]);
    }

    #[test]
    fn specs_saved_without_encoder_layers_load_with_one() {
        let mut v = serde_json::to_value(tiny(Design::A)).unwrap();
        v.as_object_mut().unwrap().remove("encoder_layers");
        let s: ModelSpec = serde_json::from_value(v).unwrap();
        assert_eq!(s, tiny(Design::A));
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut s = tiny(Design::D);
        s.encoder_layers = 0;
        assert!(matches!(Model::build(&s), Err(Error::Config(_))));
        let mut s = tiny(Design::A);
        s.timesteps = 1;
        assert!(matches!(Model::build(&s), Err(Error::Config(_))));
        let mut s = tiny(Design::A);
        s.n_features = 0;
        assert!(matches!(count_parameters(&s), Err(Error::Config(_))));
        let mut s = tiny(Design::B);
        s.dropout_rate = 1.0;
        assert!(Model::build(&s).is_err());
        assert!("E".parse::<Design>().is_err());
        assert_eq!("c".parse::<Design>().unwrap(), Design::C);
    }

    #[test]
    fn forward_keeps_shape_for_every_design() {
        let mut rng = ModelRng::seed_from_u64(0);
        for d in Design::ALL {
            let m = Model::build(&tiny(d)).unwrap();
            let x = random_tensor(&[3, 4, 2], 1.0, &mut rng);
            assert_eq!(m.forward(&x, Mode::Inference).unwrap().shape(), &[3, 4, 2]);
            let bad = random_tensor(&[3, 5, 2], 1.0, &mut rng);
            assert!(matches!(m.forward(&bad, Mode::Inference), Err(Error::Shape(_))));
        }
    }

    #[test]
    fn capsule_free_graphs_contain_no_squash() {
        for d in Design::ALL {
            let m = Model::build(&tiny(d)).unwrap();
            let mut g = Graph::new();
            let p = m.bind(&mut g);
            let x = g.constant(Tensor::zeros(&[1, 4, 2]));
            m.forward_graph(&mut g, &p, x, Mode::Inference).unwrap();
            assert_eq!(g.contains_op(OpKind::Squash), d.has_capsules(), "design {d}");
        }
    }

    #[test]
    fn set_parameters_checks_names_and_shapes() {
        let mut m = Model::build(&tiny(Design::C)).unwrap();
        let mut named: Vec<(String, Tensor)> = m.parameters().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named[0].1 = named[0].1.map(|v| v + 1.0);
        m.set_parameters(named.clone()).unwrap();
        assert_eq!(m.parameters()[0].1, &named[0].1);
        named[1].0 = "bogus".into();
        assert!(m.set_parameters(named).is_err());
    }

    #[test]
    fn matched_quartet_stays_within_band() {
        let quartet = matched_quartet(&reference_spec(), 64).unwrap();
        let counts: Vec<usize> = quartet.iter().map(|s| count_parameters(s).unwrap()).collect();
        let target = counts[0] as f64;
        for &c in &counts {
            assert!((c as f64 - target).abs() / target <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn reconstruct_matches_single_forward() {
        let m = Model::build(&tiny(Design::A)).unwrap();
        let mut rng = ModelRng::seed_from_u64(2);
        let x = random_tensor(&[5, 4, 2], 1.0, &mut rng);
        let whole = m.forward(&x, Mode::Inference).unwrap();
        let chunked = m.reconstruct(&x, 2).unwrap();
        assert!(whole.max_abs_diff(&chunked) <= 1e-12);
    }
}
