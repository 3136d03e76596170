//! The reward network `R̂_θ(φ)`: an MLP with rectifier hidden layers and a
//! scalar identity output, plus the gradient engine used by every loss.

use std::ops::Range;
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::demos::Trajectory;
use crate::error::{MlreError, Result};
use crate::scalar::{max_abs, Scalar};
use crate::seed;
use crate::weights::{Block, WeightsFile};

pub const REWARD_KIND: &str = "reward-mlp";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    pub fn n_params(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }
}

/// Flat parameters. Each layer stores its weight matrix row-major
/// (`outputs × inputs`) followed by its biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<F> {
    values: Vec<F>,
    manifest: Vec<LayerShape>,
}

impl<F: Scalar> ParamVector<F> {
    pub fn new(values: Vec<F>, manifest: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = manifest.iter().map(LayerShape::n_params).sum();
        if values.len() != expected {
            return Err(MlreError::Contract(format!(
                "{} parameter values for a manifest of {expected}",
                values.len()
            )));
        }
        Ok(ParamVector { values, manifest })
    }

    pub fn zeros(manifest: Vec<LayerShape>) -> Self {
        let n = manifest.iter().map(LayerShape::n_params).sum();
        ParamVector {
            values: vec![F::zero(); n],
            manifest,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn manifest(&self) -> &[LayerShape] {
        &self.manifest
    }

    fn offset(&self, layer: usize) -> usize {
        self.manifest[..layer].iter().map(LayerShape::n_params).sum()
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let o = self.offset(layer);
        let s = self.manifest[layer];
        o..o + s.inputs * s.outputs
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let r = self.weight_range(layer);
        r.end..r.end + self.manifest[layer].outputs
    }

    /// `self += a · x`.
    pub fn axpy(&mut self, a: F, x: &[F]) {
        assert_eq!(x.len(), self.values.len(), "parameter length mismatch");
        for (v, &d) in self.values.iter_mut().zip(x) {
            *v += a * d;
        }
    }

    pub fn scaled_add(&self, a: F, x: &[F]) -> Self {
        let mut out = self.clone();
        out.axpy(a, x);
        out
    }

    pub fn with_values(&self, values: Vec<F>) -> Result<Self> {
        Self::new(values, self.manifest.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Loss value and its gradient with respect to the flat parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradResult<F> {
    pub loss: F,
    pub grad: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardNet<F> {
    params: ParamVector<F>,
}

fn manifest_for(layer_sizes: &[usize]) -> Result<Vec<LayerShape>> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(MlreError::config(
            "layer_sizes",
            "need at least input and output sizes, all positive",
        ));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(MlreError::config(
            "layer_sizes",
            "reward network must end in a single output",
        ));
    }
    Ok(layer_sizes
        .windows(2)
        .map(|w| LayerShape {
            inputs: w[0],
            outputs: w[1],
        })
        .collect())
}

impl<F: Scalar> RewardNet<F> {
    pub fn new(params: ParamVector<F>) -> Result<Self> {
        let m = params.manifest();
        let chained = m.windows(2).all(|w| w[0].outputs == w[1].inputs);
        if m.is_empty() || !chained || m.last().unwrap().outputs != 1 {
            return Err(MlreError::Contract("parameter manifest is not a scalar MLP".into()));
        }
        Ok(RewardNet { params })
    }

    /// Uniform `±√(6/(fan_in + fan_out))` weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let manifest = manifest_for(layer_sizes)?;
        let mut params = ParamVector::zeros(manifest.clone());
        for (l, shape) in manifest.iter().enumerate() {
            let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            let mut rng = seed::rng(seed, l as u64);
            let range = params.weight_range(l);
            for v in &mut params.values[range] {
                *v = F::lit(rng.gen_range(-limit..=limit));
            }
        }
        Ok(RewardNet { params })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Ok(RewardNet {
            params: ParamVector::zeros(manifest_for(layer_sizes)?),
        })
    }

    /// Single linear layer `wᵀφ + bias`.
    pub fn linear(weights: &[F], bias: F) -> Result<Self> {
        let manifest = manifest_for(&[weights.len(), 1])?;
        let mut values = weights.to_vec();
        values.push(bias);
        Self::new(ParamVector::new(values, manifest)?)
    }

    pub fn params(&self) -> &ParamVector<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<F> {
        &mut self.params
    }

    pub fn with_params(&self, params: ParamVector<F>) -> Result<Self> {
        if params.manifest() != self.params.manifest() {
            return Err(MlreError::Contract("parameter manifest mismatch".into()));
        }
        Ok(RewardNet { params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let m = self.params.manifest();
        std::iter::once(m[0].inputs)
            .chain(m.iter().map(|s| s.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.params.manifest()[0].inputs
    }

    pub fn is_linear(&self) -> bool {
        self.params.manifest().len() == 1
    }

    /// Zeroes the bias of a linear head and projects its weights onto the
    /// L1 ball of the given radius.
    pub fn project_linear_l1(&mut self, radius: F) -> Result<()> {
        if !self.is_linear() {
            return Err(MlreError::Contract("L1 projection needs a linear reward head".into()));
        }
        let values = self.params.values_mut();
        let n = values.len() - 1;
        values[n] = F::zero();
        project_l1_ball(&mut values[..n], radius);
        Ok(())
    }

    /// Forward pass without input validation.
    pub fn value(&self, phi: &[F]) -> F {
        let p = &self.params;
        let last = p.manifest.len() - 1;
        let mut x: Vec<F> = phi.to_vec();
        for (l, shape) in p.manifest.iter().enumerate() {
            let w = &p.values[p.weight_range(l)];
            let b = &p.values[p.bias_range(l)];
            let mut z: Vec<F> = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                *zo += crate::scalar::dot(row, &x);
            }
            if l != last {
                z.iter_mut().for_each(|v| *v = v.max(F::zero()));
            }
            x = z;
        }
        x[0]
    }

    pub fn forward(&self, phi: &[F]) -> Result<F> {
        if phi.len() != self.input_dim() {
            return Err(MlreError::Contract(format!(
                "feature vector of length {} for input dimension {}",
                phi.len(),
                self.input_dim()
            )));
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(MlreError::NonFinite("reward network input".into()));
        }
        Ok(self.value(phi))
    }

    pub fn forward_f64(&self, phi: &[f64]) -> Result<F> {
        let x: Vec<F> = phi.iter().map(|&v| F::lit(v)).collect();
        self.forward(&x)
    }

    /// `Σ_{t=1..L} R̂(φ(s_t))`, undiscounted over the arrived-at states.
    pub fn traj_return_hat(&self, traj: &Trajectory) -> Result<F> {
        if traj.length == 0 {
            return Err(MlreError::Contract("empty trajectory".into()));
        }
        traj.arrived_features()
            .iter()
            .try_fold(F::zero(), |acc, phi| Ok(acc + self.forward_f64(phi)?))
    }

    /// Sign pattern of every hidden pre-activation over `inputs`, used to detect
    /// rectifier kinks when checking gradients numerically.
    pub fn activation_pattern(&self, inputs: &[Vec<F>]) -> Vec<bool> {
        let p = &self.params;
        let last = p.manifest.len() - 1;
        let mut pattern = Vec::new();
        for phi in inputs {
            let mut x = phi.clone();
            for (l, shape) in p.manifest.iter().enumerate().take(last) {
                let w = &p.values[p.weight_range(l)];
                let b = &p.values[p.bias_range(l)];
                x = (0..shape.outputs)
                    .map(|o| b[o] + crate::scalar::dot(&w[o * shape.inputs..(o + 1) * shape.inputs], &x))
                    .collect();
                pattern.extend(x.iter().map(|&z| z > F::zero()));
                x.iter_mut().for_each(|v| *v = v.max(F::zero()));
            }
        }
        pattern
    }

    pub fn to_weights_file(&self) -> WeightsFile {
        let p = &self.params;
        let mut blocks = Vec::new();
        for (l, shape) in p.manifest.iter().enumerate() {
            blocks.push(Block {
                name: format!("w{l}"),
                rows: shape.outputs,
                cols: shape.inputs,
                data: p.values[p.weight_range(l)].iter().map(|v| v.as_f64()).collect(),
            });
            blocks.push(Block {
                name: format!("b{l}"),
                rows: 1,
                cols: shape.outputs,
                data: p.values[p.bias_range(l)].iter().map(|v| v.as_f64()).collect(),
            });
        }
        WeightsFile {
            kind: REWARD_KIND.into(),
            manifest: self.layer_sizes(),
            blocks,
        }
    }

    pub fn from_weights_file(file: &WeightsFile) -> Result<Self> {
        if file.kind != REWARD_KIND {
            return Err(MlreError::parse(
                "weights file",
                format!("expected kind {REWARD_KIND}, found {}", file.kind),
            ));
        }
        let manifest = manifest_for(&file.manifest)?;
        let mut values = Vec::new();
        for (l, shape) in manifest.iter().enumerate() {
            let w = file.block(&format!("w{l}"))?;
            let b = file.block(&format!("b{l}"))?;
            if (w.rows, w.cols) != (shape.outputs, shape.inputs) || (b.rows, b.cols) != (1, shape.outputs) {
                return Err(MlreError::parse(
                    "weights file",
                    format!("layer {l} block shape mismatch"),
                ));
            }
            values.extend(w.data.iter().chain(&b.data).map(|&v| F::lit(v)));
        }
        Self::new(ParamVector::new(values, manifest)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weights_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weights_file(&WeightsFile::load(path)?)
    }
}

/// The network's parameters recorded on a tape.
pub struct Graph<'t, F: Scalar> {
    tape: &'t Tape<F>,
    params: Vec<Var<'t, F>>,
    manifest: Vec<LayerShape>,
    offsets: Vec<(Range<usize>, Range<usize>)>,
}

impl<'t, F: Scalar> Graph<'t, F> {
    fn new(tape: &'t Tape<F>, params: &ParamVector<F>) -> Self {
        let vars = params.values().iter().map(|&v| tape.var(v)).collect();
        let offsets = (0..params.manifest().len())
            .map(|l| (params.weight_range(l), params.bias_range(l)))
            .collect();
        Graph {
            tape,
            params: vars,
            manifest: params.manifest().to_vec(),
            offsets,
        }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn param(&self, i: usize) -> Var<'t, F> {
        self.params[i]
    }

    pub fn params(&self) -> &[Var<'t, F>] {
        &self.params
    }

    /// `R̂_θ(φ)` as a tape variable.
    pub fn reward(&self, phi: &[F]) -> Var<'t, F> {
        let last = self.manifest.len() - 1;
        let shape = self.manifest[0];
        let (wr, br) = &self.offsets[0];
        let w = &self.params[wr.clone()];
        let b = &self.params[br.clone()];
        let mut x: Vec<Var<'t, F>> = (0..shape.outputs)
            .map(|o| {
                let z = self
                    .tape
                    .affine_const(b[o], &w[o * shape.inputs..(o + 1) * shape.inputs], phi);
                if last == 0 {
                    z
                } else {
                    z.relu()
                }
            })
            .collect();
        for l in 1..=last {
            let shape = self.manifest[l];
            let (wr, br) = &self.offsets[l];
            let w = &self.params[wr.clone()];
            let b = &self.params[br.clone()];
            x = (0..shape.outputs)
                .map(|o| {
                    let z = self.tape.affine(b[o], &w[o * shape.inputs..(o + 1) * shape.inputs], &x);
                    if l == last {
                        z
                    } else {
                        z.relu()
                    }
                })
                .collect();
        }
        x[0]
    }
}

/// Reverse-mode gradient of `objective` at the network's current parameters.
pub fn grad<F, C>(net: &RewardNet<F>, objective: C) -> Result<GradResult<F>>
where
    F: Scalar,
    C: for<'t> Fn(&Graph<'t, F>) -> Var<'t, F>,
{
    let tape = Tape::new();
    let graph = Graph::new(&tape, net.params());
    let out = objective(&graph);
    let loss = out.value();
    if !loss.is_finite() {
        return Err(MlreError::NonFinite(format!("loss evaluated to {loss}")));
    }
    let adj = tape.gradient(out);
    let grad: Vec<F> = graph.params.iter().map(|v| adj[v.index()]).collect();
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(MlreError::NonFinite(format!("gradient coordinate {i}")));
    }
    Ok(GradResult { loss, grad })
}

/// Hessian-vector product `H v` by central differences of the gradient along
/// `v`, with a perturbation of relative size `1e-4`.
pub fn hvp<F, C>(net: &RewardNet<F>, objective: C, v: &[F]) -> Result<Vec<F>>
where
    F: Scalar,
    C: for<'t> Fn(&Graph<'t, F>) -> Var<'t, F>,
{
    let vmax = max_abs(v);
    if vmax == F::zero() {
        return Ok(vec![F::zero(); v.len()]);
    }
    let radius = F::lit(1e-4) * (F::one() + max_abs(net.params().values()));
    let step = radius / vmax;
    let plus = net.with_params(net.params().scaled_add(step, v))?;
    let minus = net.with_params(net.params().scaled_add(-step, v))?;
    let gp = grad(&plus, &objective)?.grad;
    let gm = grad(&minus, &objective)?.grad;
    let two = F::lit(2.0);
    Ok(gp.iter().zip(&gm).map(|(&a, &b)| (a - b) / (two * step)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    /// Treats the adapted parameters as constant in `θ`.
    FirstOrder,
    /// Differentiates through the inner step: `(I − α H_support) ∇L_query(θ′)`.
    Exact,
}

/// Gradient of `query(θ − α ∇support(θ))` with respect to `θ`. The returned
/// loss is the query loss at the adapted parameters.
pub fn meta_grad<F, S, Q>(
    net: &RewardNet<F>,
    support: S,
    query: Q,
    alpha: F,
    mode: MetaGradMode,
) -> Result<GradResult<F>>
where
    F: Scalar,
    S: for<'t> Fn(&Graph<'t, F>) -> Var<'t, F>,
    Q: for<'t> Fn(&Graph<'t, F>) -> Var<'t, F>,
{
    if alpha < F::zero() {
        return Err(MlreError::config("alpha", "must be non-negative"));
    }
    let inner = grad(net, &support)?;
    let adapted = net.with_params(net.params().scaled_add(-alpha, &inner.grad))?;
    let outer = grad(&adapted, &query)?;
    let grad = match mode {
        MetaGradMode::FirstOrder => outer.grad,
        MetaGradMode::Exact => {
            let hv = hvp(net, &support, &outer.grad)?;
            outer.grad.iter().zip(&hv).map(|(&g, &h)| g - alpha * h).collect()
        }
    };
    Ok(GradResult { loss: outer.loss, grad })
}

/// Euclidean projection onto `{x : ‖x‖₁ ≤ radius}` by soft-thresholding at
/// the level found from the sorted magnitudes.
pub fn project_l1_ball<F: Scalar>(x: &mut [F], radius: F) {
    let norm = x.iter().fold(F::zero(), |a, v| a + v.abs());
    if norm <= radius {
        return;
    }
    let mut mags: Vec<F> = x.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = F::zero();
    let mut tau = F::zero();
    for (k, &m) in mags.iter().enumerate() {
        cum += m;
        let t = (cum - radius) / F::lit((k + 1) as f64);
        if m > t {
            tau = t;
        } else {
            break;
        }
    }
    for v in x.iter_mut() {
        let shrunk = (v.abs() - tau).max(F::zero());
        *v = if *v < F::zero() { -shrunk } else { shrunk };
    }
}
