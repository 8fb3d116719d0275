//! The stage-2 network: fully connected manifold layers followed by a linear
//! softmax classifier, operating on precomputed features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, NodeId, Tape};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MODEL_MAGIC: &str = "DRMEA-MODEL v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply(&self, z: &Matrix) -> Matrix {
        match *self {
            Activation::LeakyRelu(alpha) => z.map(|v| autodiff::leaky_relu(v, alpha)),
            Activation::Tanh => z.map(f64::tanh),
        }
    }

    fn apply_taped(&self, tape: &mut Tape, z: NodeId) -> NodeId {
        match *self {
            Activation::LeakyRelu(alpha) => tape.leaky_relu(z, alpha),
            Activation::Tanh => tape.tanh(z),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::LeakyRelu(alpha) => write!(f, "leaky_relu:{alpha}"),
            Activation::Tanh => write!(f, "tanh"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "tanh" => Ok(Activation::Tanh),
            None if s == "leaky_relu" => Ok(Activation::LeakyRelu(0.2)),
            Some(("leaky_relu", alpha)) => alpha
                .parse()
                .map(Activation::LeakyRelu)
                .map_err(|_| Error::Config(format!("bad leaky_relu slope {alpha:?}"))),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

/// Parses a whitespace-separated activation list such as `leaky_relu:0.2 tanh`.
pub fn parse_activations(s: &str) -> Result<Vec<Activation>> {
    s.split_whitespace().map(str::parse).collect()
}

pub fn format_activations(acts: &[Activation]) -> String {
    acts.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn glorot(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Dense {
            weight: Matrix::from_fn(d_out, d_in, |_, _| rng.random_range(-bound..=bound)),
            bias: Matrix::zeros(d_out, 1),
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.weight.matmul(x)?.add_column(&self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldNetwork {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
    pub classifier: Dense,
}

/// Plain (untaped) forward results.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Post-activation features of each manifold layer.
    pub h: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct TapedForward {
    pub h: Vec<NodeId>,
    pub logits: NodeId,
}

/// Parameter leaves registered on a tape, in [`ManifoldNetwork::params`] order.
#[derive(Debug, Clone)]
pub struct ParamNodes(pub Vec<NodeId>);

impl ManifoldNetwork {
    /// Glorot-uniform weights and zero biases, deterministic per seed.
    /// `dims` is `[d_in, d_1, ..., d_L, classes]` with one activation per
    /// manifold layer.
    pub fn init(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::Config(format!(
                "dims needs input, at least one manifold layer and classes; got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("dims must be positive: {dims:?}")));
        }
        if activations.len() != dims.len() - 2 {
            return Err(Error::Config(format!(
                "{} activations for {} manifold layers",
                activations.len(),
                dims.len() - 2
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 1;
        let layers = dims[..last]
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], &mut rng))
            .collect();
        let classifier = Dense::glorot(dims[last - 1], dims[last], &mut rng);
        Ok(ManifoldNetwork {
            layers,
            activations: activations.to_vec(),
            classifier,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.cols()];
        dims.extend(self.layers.iter().map(|l| l.weight.rows()));
        dims.push(self.classifier.weight.rows());
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn classes(&self) -> usize {
        self.classifier.weight.rows()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 1..=self.layers.len() {
            names.push(format!("layer{l}.weight"));
            names.push(format!("layer{l}.bias"));
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut h = Vec::with_capacity(self.layers.len());
        let mut current = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h.push(act.apply(&layer.apply(current)?));
            current = h.last().expect("just pushed");
        }
        let logits = self.classifier.apply(current)?;
        let probs = autodiff::softmax_columns(&logits);
        Ok(ForwardPass { h, logits, probs })
    }

    /// Index of the largest logit per column.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?.logits;
        Ok((0..logits.cols()).map(|j| argmax(logits.col(j))).collect())
    }

    pub fn register(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes(self.params().into_iter().map(|p| tape.leaf(p.clone())).collect())
    }

    pub fn forward_taped(&self, tape: &mut Tape, params: &ParamNodes, x: NodeId) -> Result<TapedForward> {
        self.check_input(tape.value(x))?;
        let mut h = Vec::with_capacity(self.layers.len());
        let mut current = x;
        for (l, act) in self.activations.iter().enumerate() {
            let z = tape.matmul(params.0[2 * l], current)?;
            let z = tape.add_bias(z, params.0[2 * l + 1])?;
            current = act.apply_taped(tape, z);
            h.push(current);
        }
        let k = 2 * self.layers.len();
        let z = tape.matmul(params.0[k], current)?;
        let logits = tape.add_bias(z, params.0[k + 1])?;
        Ok(TapedForward { h, logits })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(Error::Usage(format!(
                "network expects {}-dimensional input, got {}",
                self.input_dim(),
                x.rows()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MODEL_MAGIC);
        out.push('\n');
        let dims: Vec<String> = self.dims().iter().map(ToString::to_string).collect();
        out.push_str(&dims.join(" "));
        out.push('\n');
        out.push_str(&format_activations(&self.activations));
        out.push('\n');
        for (name, p) in self.param_names().iter().zip(self.params()) {
            out.push_str(&format!("{name} {}x{}", p.rows(), p.cols()));
            for i in 0..p.rows() {
                for j in 0..p.cols() {
                    out.push(' ');
                    out.push_str(&crate::fmt_f64(p[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(MODEL_MAGIC) {
            return Err(perr(1, format!("expected header {MODEL_MAGIC:?}")));
        }
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| perr(2, "missing dims line".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| perr(2, format!("bad dimension {t:?}"))))
            .collect::<Result<_>>()?;
        let acts = parse_activations(lines.next().ok_or_else(|| perr(3, "missing activations".into()))?)
            .map_err(|e| perr(3, e.to_string()))?;
        let mut net = ManifoldNetwork::init(&dims, &acts, 0).map_err(|e| perr(2, e.to_string()))?;
        let names = net.param_names();
        for (k, (name, p)) in names.iter().zip(net.params_mut()).enumerate() {
            let line_no = 4 + k;
            let line = lines
                .next()
                .ok_or_else(|| perr(line_no, format!("missing parameter {name}")))?;
            let mut tokens = line.split_whitespace();
            if tokens.next() != Some(name.as_str()) {
                return Err(perr(line_no, format!("expected parameter {name}")));
            }
            let shape = format!("{}x{}", p.rows(), p.cols());
            if tokens.next() != Some(shape.as_str()) {
                return Err(perr(line_no, format!("expected shape {shape}")));
            }
            let values: Vec<f64> = tokens
                .map(|t| t.parse().map_err(|_| perr(line_no, format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != p.rows() * p.cols() {
                return Err(perr(line_no, format!("{} values for shape {shape}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(perr(line_no, "non-finite parameter".into()));
            }
            let cols = p.cols();
            for (idx, v) in values.into_iter().enumerate() {
                p[(idx / cols, idx % cols)] = v;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ManifoldNetwork::from_text(&text, path)
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acts() -> Vec<Activation> {
        vec![Activation::LeakyRelu(0.2), Activation::Tanh]
    }

    #[test]
    fn init_is_deterministic() {
        let a = ManifoldNetwork::init(&[4, 8, 3, 2], &acts(), 42).unwrap();
        let b = ManifoldNetwork::init(&[4, 8, 3, 2], &acts(), 42).unwrap();
        assert_eq!(a, b);
        let c = ManifoldNetwork::init(&[4, 8, 3, 2], &acts(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes() {
        let net = ManifoldNetwork::init(&[4, 8, 3, 2], &acts(), 0).unwrap();
        let shapes: Vec<_> = net.params().iter().map(|p| p.shape()).collect();
        assert_eq!(shapes, vec![(8, 4), (8, 1), (3, 8), (3, 1), (2, 3), (2, 1)]);
        assert_eq!(net.dims(), vec![4, 8, 3, 2]);
    }

    #[test]
    fn init_respects_glorot_bounds() {
        let dims = [6, 10, 5, 3];
        for seed in 0..100 {
            let net = ManifoldNetwork::init(&dims, &acts(), seed).unwrap();
            let dense = net.layers.iter().chain(std::iter::once(&net.classifier));
            for d in dense {
                let (d_out, d_in) = d.weight.shape();
                let bound = (6.0 / (d_in + d_out) as f64).sqrt();
                assert!(d.weight.max_abs() <= bound);
                assert_eq!(d.bias.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(
            ManifoldNetwork::init(&[4, 0, 3, 2], &acts(), 0),
            Err(Error::Config(_))
        ));
        assert!(ManifoldNetwork::init(&[4, 2], &[], 0).is_err());
        assert!(ManifoldNetwork::init(&[4, 8, 3, 2], &acts()[..1], 0).is_err());
    }

    #[test]
    fn zero_network_predicts_uniform() {
        let mut net = ManifoldNetwork::init(&[3, 4, 4, 5], &acts(), 1).unwrap();
        for p in net.params_mut() {
            p.as_mut_slice().fill(0.0);
        }
        let x = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let fp = net.forward(&x).unwrap();
        assert_eq!(fp.logits.max_abs(), 0.0);
        assert!(fp.probs.as_slice().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forward_matches_hand_computation() {
        let mut net = ManifoldNetwork::init(&[2, 3, 2, 2], &acts(), 0).unwrap();
        net.layers[0].weight = Matrix::from_rows(&[&[1.0, -1.0], &[0.5, 2.0], &[-1.0, 0.0]]).unwrap();
        net.layers[0].bias = Matrix::column_vector(&[0.0, -1.0, 0.5]).unwrap();
        net.layers[1].weight = Matrix::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 1.0, -1.0]]).unwrap();
        net.layers[1].bias = Matrix::column_vector(&[0.1, 0.0]).unwrap();
        net.classifier.weight = Matrix::from_rows(&[&[1.0, 1.0], &[2.0, -1.0]]).unwrap();
        net.classifier.bias = Matrix::column_vector(&[0.0, 0.3]).unwrap();
        let x = Matrix::column_vector(&[1.0, 2.0]).unwrap();

        // layer 1: z = [1-2, 0.5+4-1, -1+0.5] = [-1, 3.5, -0.5]; leaky: [-0.2, 3.5, -0.1]
        let h1 = [-0.2, 3.5, -0.1];
        // layer 2: z = [-0.2-0.1+0.1, 3.5+0.1] = [-0.2, 3.6]
        let h2 = [(-0.2f64).tanh(), 3.6f64.tanh()];
        let logits = [h2[0] + h2[1], 2.0 * h2[0] - h2[1] + 0.3];

        let fp = net.forward(&x).unwrap();
        for (a, b) in fp.h[0].as_slice().iter().zip(h1) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in fp.h[1].as_slice().iter().zip(h2) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in fp.logits.as_slice().iter().zip(logits) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((fp.probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tanh_layer_stays_in_open_interval() {
        let net = ManifoldNetwork::init(&[5, 7, 4, 3], &acts(), 9).unwrap();
        let x = Matrix::from_fn(5, 20, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let fp = net.forward(&x).unwrap();
        assert!(fp.h[1].as_slice().iter().all(|v| v.abs() < 1.0));
        for j in 0..20 {
            let s: f64 = fp.probs.col(j).iter().sum();
            assert!((s - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn forward_is_batch_decomposable() {
        let net = ManifoldNetwork::init(&[4, 6, 3, 3], &acts(), 5).unwrap();
        let x = Matrix::from_fn(4, 9, |i, j| ((i * 5 + j * 2) % 7) as f64 * 0.3 - 1.0);
        let full = net.forward(&x).unwrap();
        for j in 0..9 {
            let single = net.forward(&x.select_columns(&[j]).unwrap()).unwrap();
            assert_eq!(single.logits.col(0), full.logits.col(j));
            assert_eq!(single.h[0].col(0), full.h[0].col(j));
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let net = ManifoldNetwork::init(&[4, 6, 3, 3], &acts(), 6).unwrap();
        let x0 = Matrix::from_fn(4, 5, |i, j| (i as f64 - j as f64) * 0.4);
        let plain = net.forward(&x0).unwrap();
        let mut tape = Tape::new();
        let params = net.register(&mut tape);
        let x = tape.constant(x0);
        let taped = net.forward_taped(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(taped.logits), &plain.logits);
        assert_eq!(tape.value(taped.h[1]), &plain.h[1]);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let net = ManifoldNetwork::init(&[4, 6, 3, 3], &acts(), 6).unwrap();
        assert!(matches!(net.forward(&Matrix::zeros(3, 2)), Err(Error::Usage(_))));
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let net = ManifoldNetwork::init(&[4, 6, 3, 3], &acts(), 77).unwrap();
        let text = net.to_text();
        assert!(text.starts_with("DRMEA-MODEL v1\n4 6 3 3\nleaky_relu:0.2 tanh\nlayer1.weight 6x4 "));
        let back = ManifoldNetwork::from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_model_reports_line() {
        let net = ManifoldNetwork::init(&[2, 2, 2, 2], &acts(), 1).unwrap();
        let text = net.to_text().replace("layer2.bias 2x1", "layer2.bias 3x1");
        match ManifoldNetwork::from_text(&text, Path::new("m")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn activation_spec_round_trip() {
        let parsed = parse_activations("leaky_relu:0.2 tanh").unwrap();
        assert_eq!(parsed, acts());
        assert_eq!(format_activations(&parsed), "leaky_relu:0.2 tanh");
        assert!(parse_activations("relu").is_err());
    }
}
