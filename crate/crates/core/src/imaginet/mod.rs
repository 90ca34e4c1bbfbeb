//! Frozen two-path recurrent caption model: a shared word embedding feeding a
//! language-model GRU (next-word scores) and a visual GRU (image feature regression).
//!
//! Row-vector convention throughout: inputs are `1 x d` rows, `W_*` are `d x h`,
//! `U_*` are `h x h`, projections are `h x out`. One GRU step is
//!
//! ```text
//! z  = σ(x W_z + h U_z + b_z)
//! r  = σ(x W_r + h U_r + b_r)
//! h~ = tanh(x W_h + (r ⊙ h) U_h + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```
//!
//! with `h_0 = 0`. Neuron activations are read at the final timestep only.

mod io;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{sum, Scalar};
use crate::tensor::{Matrix, Tape, Var};

pub use io::{load_weights, save_weights, BlobRecord, Manifest};
pub use train::{train_toy, TrainConfig, TrainReport};

/// Model dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub visual: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T> {
    pub w_z: Matrix<T>,
    pub u_z: Matrix<T>,
    pub b_z: Matrix<T>,
    pub w_r: Matrix<T>,
    pub u_r: Matrix<T>,
    pub b_r: Matrix<T>,
    pub w_h: Matrix<T>,
    pub u_h: Matrix<T>,
    pub b_h: Matrix<T>,
}

/// Names of the GRU parameter blobs in storage order.
pub(crate) const GRU_NAMES: [&str; 9] = ["W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"];

impl<T: Scalar> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Matrix::zeros(input, hidden),
            u_z: Matrix::zeros(hidden, hidden),
            b_z: Matrix::zeros(1, hidden),
            w_r: Matrix::zeros(input, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            b_r: Matrix::zeros(1, hidden),
            w_h: Matrix::zeros(input, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_h: Matrix::zeros(1, hidden),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.u_z.rows()
    }

    pub(crate) fn matrices(&self) -> [&Matrix<T>; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h,
            &self.b_h,
        ]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix<T>; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}

/// One path of the model: a GRU and its affine output head.
#[derive(Clone, Debug, PartialEq)]
pub struct PathWeights<T> {
    pub gru: GruParams<T>,
    pub proj: Matrix<T>,
    pub proj_bias: Matrix<T>,
}

impl<T: Scalar> PathWeights<T> {
    pub fn zeros(input: usize, hidden: usize, out: usize) -> Self {
        PathWeights {
            gru: GruParams::zeros(input, hidden),
            proj: Matrix::zeros(hidden, out),
            proj_bias: Matrix::zeros(1, out),
        }
    }

    pub fn output_size(&self) -> usize {
        self.proj.cols()
    }

    pub(crate) fn matrices(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = GRU_NAMES
            .iter()
            .zip(self.gru.matrices())
            .map(|(n, m)| (n.to_string(), m))
            .collect();
        out.push(("P".into(), &self.proj));
        out.push(("P_bias".into(), &self.proj_bias));
        out
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = self.gru.matrices_mut().into_iter().collect();
        out.push(&mut self.proj);
        out.push(&mut self.proj_bias);
        out
    }
}

/// All parameters of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    /// `V x d`; row 0 belongs to the padding token.
    pub embedding: Matrix<T>,
    pub lang: PathWeights<T>,
    pub visual: PathWeights<T>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelWeights {
            embedding: Matrix::zeros(dims.vocab, dims.embed),
            lang: PathWeights::zeros(dims.embed, dims.hidden, dims.vocab),
            visual: PathWeights::zeros(dims.embed, dims.hidden, dims.visual),
        }
    }

    /// Uniform initialization: weight matrices in `±scale/√rows`, embeddings in
    /// `±scale`, biases zero.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, scale: f64, rng: &mut R) -> Self {
        let mut w = Self::zeros(dims);
        let mut fill = |m: &mut Matrix<T>, bound: f64| {
            for v in m.data_mut() {
                *v = T::lit(rng.random_range(-bound..=bound));
            }
        };
        fill(&mut w.embedding, scale);
        for path in [&mut w.lang, &mut w.visual] {
            for m in path.matrices_mut() {
                if m.rows() > 1 {
                    let bound = scale / (m.rows() as f64).sqrt();
                    fill(m, bound);
                }
            }
        }
        w
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedding.rows(),
            embed: self.embedding.cols(),
            hidden: self.lang.gru.hidden_size(),
            visual: self.visual.output_size(),
        }
    }

    pub fn path(&self, path: Path) -> &PathWeights<T> {
        match path {
            Path::Lang => &self.lang,
            Path::Visual => &self.visual,
        }
    }

    /// Width of a layer addressed by a target.
    pub fn layer_width(&self, path: Path, layer: Layer) -> usize {
        match layer {
            Layer::Hidden => self.path(path).gru.hidden_size(),
            Layer::Projection => self.path(path).output_size(),
        }
    }

    /// Named matrices in canonical storage order.
    pub fn named_matrices(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("M".to_string(), &self.embedding)];
        for (prefix, p) in [("lang", &self.lang), ("visual", &self.visual)] {
            out.extend(p.matrices().into_iter().map(|(n, m)| (format!("{prefix}.{n}"), m)));
        }
        out
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.lang.matrices_mut());
        out.extend(self.visual.matrices_mut());
        out
    }

    /// Expected `(rows, cols)` for every named matrix under `dims`.
    pub fn expected_shapes(dims: ModelDims) -> Vec<(String, (usize, usize))> {
        Self::zeros(dims)
            .named_matrices()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect()
    }

    /// Checks shape consistency, `V >= 2` and finiteness.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if dims.vocab < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary size {} < 2", dims.vocab)));
        }
        for ((name, m), (_, expected)) in self.named_matrices().into_iter().zip(Self::expected_shapes(dims)) {
            if m.shape() != expected {
                return Err(Error::BlobShape {
                    name,
                    expected: format!("{}x{}", expected.0, expected.1),
                    found: m.shape_string(),
                });
            }
            m.validate(&name)?;
        }
        Ok(())
    }

    /// SHA-256 over dims and every matrix's little-endian `f64` bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let d = self.dims();
        for v in [d.vocab, d.embed, d.hidden, d.visual] {
            h.update((v as u64).to_le_bytes());
        }
        for (name, m) in self.named_matrices() {
            h.update(name.as_bytes());
            for &v in m.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let cast_path = |p: &PathWeights<T>| PathWeights {
            gru: GruParams {
                w_z: p.gru.w_z.cast(),
                u_z: p.gru.u_z.cast(),
                b_z: p.gru.b_z.cast(),
                w_r: p.gru.w_r.cast(),
                u_r: p.gru.u_r.cast(),
                b_r: p.gru.b_r.cast(),
                w_h: p.gru.w_h.cast(),
                u_h: p.gru.u_h.cast(),
                b_h: p.gru.b_h.cast(),
            },
            proj: p.proj.cast(),
            proj_bias: p.proj_bias.cast(),
        };
        ModelWeights {
            embedding: self.embedding.cast(),
            lang: cast_path(&self.lang),
            visual: cast_path(&self.visual),
        }
    }

    /// Embedding rows for `tokens` (index lookup).
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Matrix<T>> {
        self.embedding.gather_rows(tokens)
    }

    /// `f(input)`: forward an embedding sequence (`T x d`) and read the target.
    pub fn activation(&self, input: &Matrix<T>, target: &NeuronTarget) -> Result<T> {
        target.check(self)?;
        let mut tape = Tape::new();
        let pv = bind_path(&mut tape, self.path(target.path));
        let x = tape.constant(input);
        let fwd = forward(&mut tape, x, &pv)?;
        Ok(target.aggregate(tape.value(fwd.layer(target.layer)?).row(0)))
    }

    pub fn activation_of_tokens(&self, tokens: &[usize], target: &NeuronTarget) -> Result<T> {
        self.activation(&self.embed_tokens(tokens)?, target)
    }

    /// Final hidden state and projection output for a batch of equally long token
    /// windows, one row per window. Row `i` is bitwise equal to the single-window
    /// forward of `windows[i]`.
    pub fn final_outputs(&self, windows: &[&[usize]], path: Path) -> Result<(Matrix<T>, Matrix<T>)> {
        let len = windows.first().map_or(0, |w| w.len());
        if len == 0 || windows.iter().any(|w| w.len() != len) {
            return Err(Error::InvalidArgument("windows must be nonempty and equally long".into()));
        }
        let mut tape = Tape::new();
        let pv = bind_path(&mut tape, self.path(path));
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let idx: Vec<usize> = windows.iter().map(|w| w[t]).collect();
            steps.push(tape.constant_owned(self.embedding.gather_rows(&idx)?));
        }
        let fwd = forward_steps(&mut tape, &steps, &pv)?;
        let hidden = tape.value(*fwd.hidden.last().expect("len > 0")).clone();
        let proj = tape.value(fwd.projection).clone();
        Ok((hidden, proj))
    }
}

/// Which GRU path a neuron belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Lang,
    Visual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    /// Affine output head (pre-softmax scores for the language path).
    Projection,
    /// Final GRU hidden state.
    Hidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Single,
    Mean,
}

/// The scalar `f` being maximized: one neuron or the mean of a neuron group, read
/// at the final timestep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronTarget {
    pub path: Path,
    pub layer: Layer,
    pub indices: Vec<usize>,
    pub aggregation: Aggregation,
}

impl NeuronTarget {
    pub fn single(path: Path, layer: Layer, index: usize) -> Self {
        NeuronTarget {
            path,
            layer,
            indices: vec![index],
            aggregation: Aggregation::Single,
        }
    }

    pub fn group(path: Path, layer: Layer, indices: Vec<usize>) -> Self {
        NeuronTarget {
            path,
            layer,
            indices,
            aggregation: Aggregation::Mean,
        }
    }

    /// Validates the target against a model.
    pub fn check<T: Scalar>(&self, weights: &ModelWeights<T>) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::InvalidArgument("target has no neuron indices".into()));
        }
        if self.aggregation == Aggregation::Single && self.indices.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "single-neuron target with {} indices",
                self.indices.len()
            )));
        }
        let width = weights.layer_width(self.path, self.layer);
        if let Some(&i) = self.indices.iter().find(|&&i| i >= width) {
            return Err(Error::IndexOutOfRange {
                what: "target layer",
                index: i,
                width,
            });
        }
        Ok(())
    }

    /// Reads the target from one row of layer output.
    pub fn aggregate<T: Scalar>(&self, row: &[T]) -> T {
        match self.aggregation {
            Aggregation::Single => row[self.indices[0]],
            Aggregation::Mean => {
                let s: T = sum(self.indices.iter().map(|&i| row[i]));
                s / T::from_usize(self.indices.len()).expect("length fits scalar")
            }
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Path::Lang => "lang",
            Path::Visual => "vis",
        })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Projection => "proj",
            Layer::Hidden => "hid",
        })
    }
}

impl FromStr for Path {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lang" | "language" => Ok(Path::Lang),
            "vis" | "visual" => Ok(Path::Visual),
            _ => Err(Error::InvalidArgument(format!("unknown path '{s}' (lang|vis)"))),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proj" | "projection" => Ok(Layer::Projection),
            "hid" | "hidden" => Ok(Layer::Hidden),
            _ => Err(Error::InvalidArgument(format!("unknown layer '{s}' (proj|hid)"))),
        }
    }
}

/// `path:layer:i` for a single neuron, `path:layer:i+j+k` for a group mean.
impl fmt::Display for NeuronTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.indices.iter().map(usize::to_string).collect();
        write!(f, "{}:{}:{}", self.path, self.layer, idx.join("+"))?;
        if self.aggregation == Aggregation::Mean && self.indices.len() == 1 {
            f.write_str("+")?;
        }
        Ok(())
    }
}

impl FromStr for NeuronTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [path, layer, idx] = parts.as_slice() else {
            return Err(Error::InvalidArgument(format!(
                "target '{s}' is not of the form path:layer:index[+index...]"
            )));
        };
        let indices = idx
            .split('+')
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad neuron index '{p}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregation = if idx.contains('+') {
            Aggregation::Mean
        } else {
            Aggregation::Single
        };
        Ok(NeuronTarget {
            path: path.parse()?,
            layer: layer.parse()?,
            indices,
            aggregation,
        })
    }
}

/// GRU parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    w_z: Var,
    u_z: Var,
    b_z: Var,
    w_r: Var,
    u_r: Var,
    b_r: Var,
    w_h: Var,
    u_h: Var,
    b_h: Var,
    hidden: usize,
}

/// A path's parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PathVars {
    pub gru: GruVars,
    pub proj: Var,
    pub proj_bias: Var,
}

/// Records a path's weights as constants.
pub fn bind_path<'w, T: Scalar>(tape: &mut Tape<'w, T>, p: &'w PathWeights<T>) -> PathVars {
    bind_path_with(tape, p, |tape, m| tape.constant(m))
}

pub(crate) fn bind_path_with<'w, T: Scalar>(
    tape: &mut Tape<'w, T>,
    p: &'w PathWeights<T>,
    mut leaf: impl FnMut(&mut Tape<'w, T>, &'w Matrix<T>) -> Var,
) -> PathVars {
    let g = &p.gru;
    PathVars {
        gru: GruVars {
            w_z: leaf(tape, &g.w_z),
            u_z: leaf(tape, &g.u_z),
            b_z: leaf(tape, &g.b_z),
            w_r: leaf(tape, &g.w_r),
            u_r: leaf(tape, &g.u_r),
            b_r: leaf(tape, &g.b_r),
            w_h: leaf(tape, &g.w_h),
            u_h: leaf(tape, &g.u_h),
            b_h: leaf(tape, &g.b_h),
            hidden: g.hidden_size(),
        },
        proj: leaf(tape, &p.proj),
        proj_bias: leaf(tape, &p.proj_bias),
    }
}

fn gate<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_row(s, b)
}

/// One GRU step for a batch of rows `x: B x d`, `h: B x hidden`.
pub fn gru_cell<T: Scalar>(tape: &mut Tape<'_, T>, g: &GruVars, x: Var, h: Var) -> Result<Var> {
    let z_pre = gate(tape, x, g.w_z, h, g.u_z, g.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, x, g.w_r, h, g.u_r, g.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, x, g.w_h, rh, g.u_h, g.b_h)?;
    let cand = tape.tanh(cand_pre);
    let keep = tape.affine(z, -T::one(), T::one());
    let kept = tape.mul(keep, h)?;
    let update = tape.mul(z, cand)?;
    tape.add(kept, update)
}

/// Projection head applied to hidden rows.
pub fn project<T: Scalar>(tape: &mut Tape<'_, T>, pv: &PathVars, h: Var) -> Result<Var> {
    let out = tape.matmul(h, pv.proj)?;
    tape.add_row(out, pv.proj_bias)
}

/// Recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `h_1 .. h_T`.
    pub hidden: Vec<Var>,
    /// Affine head at the final timestep.
    pub projection: Var,
}

impl ForwardVars {
    pub fn layer(&self, layer: Layer) -> Result<Var> {
        match layer {
            Layer::Projection => Ok(self.projection),
            Layer::Hidden => self
                .hidden
                .last()
                .copied()
                .ok_or_else(|| Error::InvalidArgument("empty input sequence".into())),
        }
    }
}

/// Runs a path over per-timestep inputs (each `B x d`), starting from `h_0 = 0`.
pub fn forward_steps<T: Scalar>(tape: &mut Tape<'_, T>, steps: &[Var], pv: &PathVars) -> Result<ForwardVars> {
    let Some(first) = steps.first() else {
        return Err(Error::InvalidArgument("input sequence must have T >= 1".into()));
    };
    let batch = tape.value(*first).rows();
    let mut h = tape.constant_owned(Matrix::zeros(batch, pv.gru.hidden));
    let mut hidden = Vec::with_capacity(steps.len());
    for (t, &x) in steps.iter().enumerate() {
        h = gru_cell(tape, &pv.gru, x, h)?;
        if !tape.value(h).is_finite() {
            return Err(Error::NonFinite(format!("hidden state at timestep {}", t + 1)));
        }
        hidden.push(h);
    }
    let projection = project(tape, pv, h)?;
    if !tape.value(projection).is_finite() {
        return Err(Error::NonFinite(format!("projection at timestep {}", steps.len())));
    }
    Ok(ForwardVars { hidden, projection })
}

/// Forward over an embedding sequence `T x d` (one row per position).
pub fn forward<T: Scalar>(tape: &mut Tape<'_, T>, input: Var, pv: &PathVars) -> Result<ForwardVars> {
    let (rows, cols) = tape.value(input).shape();
    let d = tape.value(pv.gru.w_z).rows();
    if cols != d {
        return Err(Error::shape("forward", format!("input width {cols}"), format!("embedding size {d}")));
    }
    let steps = (0..rows).map(|t| tape.row(input, t)).collect::<Result<Vec<_>>>()?;
    forward_steps(tape, &steps, pv)
}

/// Records the target's scalar on the tape.
pub fn target_value<T: Scalar>(tape: &mut Tape<'_, T>, fwd: &ForwardVars, target: &NeuronTarget) -> Result<Var> {
    let layer = fwd.layer(target.layer)?;
    let picked = tape.select_cols(layer, target.indices.clone())?;
    Ok(tape.mean(picked))
}
