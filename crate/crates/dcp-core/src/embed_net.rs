//! Multilayer-perceptron embedding nets.
//!
//! A net is a stack of dense layers with rectifier activations on the hidden
//! layers and L2 row normalization after the final linear layer, so every
//! embedding lands on the unit sphere. Forward keeps a trace; backward
//! propagates an arbitrary upstream gradient on the normalized output through
//! the normalization Jacobian (I - ee^T)/|u| and the stack.
//!
//! Two nets are used in training: the gradient-trained probe net and a
//! gallery net that never sees gradients and instead inherits probe
//! parameters as a moving average ([`momentum_sync`]).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::mat::{axpy, dot, Mat};
use crate::rng::{tags, Rng};

const NET_MAGIC: &[u8; 4] = b"DCPN";
const NET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// Row o holds the weights of output unit o (shape d_out x d_in).
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedNet {
    dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Per-layer activations kept by forward for the matching backward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    input: Mat,
    /// Post-rectifier activations of each hidden layer.
    hidden: Vec<Mat>,
    /// Final linear output before normalization.
    pre_norm: Mat,
    /// Row norms of `pre_norm`, clamped away from zero.
    norms: Vec<f64>,
    /// Normalized output (needed for the normalization Jacobian).
    output: Mat,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &EmbedNet) -> Gradients {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, b.weight.data(), a.weight.data_mut());
            axpy(1.0, &b.bias, &mut a.bias);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.max_abs().max(l.bias.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
            .fold(0.0, f64::max)
    }
}

impl EmbedNet {
    /// Scaled-Gaussian initialization: variance 2/fan_in on rectifier layers,
    /// 1/fan_in on the final linear layer; biases zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<EmbedNet> {
        if dims.len() < 2 {
            return Err(Error::Config("net dims need at least [d_in, d_out]".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Config("net dims must all be positive".into()));
        }
        let mut rng = Rng::stream(seed, tags::NET_INIT);
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = if l + 1 < n_layers {
                (2.0 / fan_in as f64).sqrt()
            } else {
                (1.0 / fan_in as f64).sqrt()
            };
            let mut weight = Mat::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                *v = std * rng.normal();
            }
            layers.push(DenseLayer { weight, bias: vec![0.0; fan_out] });
        }
        Ok(EmbedNet { dims: dims.to_vec(), layers })
    }

    pub fn from_layers(dims: Vec<usize>, layers: Vec<DenseLayer>) -> EmbedNet {
        EmbedNet { dims, layers }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, net expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite value in net input".into()));
        }
        Ok(())
    }

    fn forward_serial(&self, x: &Mat) -> (Mat, ForwardTrace) {
        let n_layers = self.layers.len();
        let mut hidden = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut act = x.clone();
        for l in 0..n_layers - 1 {
            let mut z = linear(&act, &self.layers[l]);
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            hidden.push(z.clone());
            act = z;
        }
        let pre_norm = linear(&act, &self.layers[n_layers - 1]);
        let mut output = pre_norm.clone();
        let mut norms = Vec::with_capacity(output.rows());
        for r in 0..output.rows() {
            let row = output.row_mut(r);
            let n = crate::mat::l2_norm(row).max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let trace =
            ForwardTrace { input: x.clone(), hidden, pre_norm, norms, output: output.clone() };
        (output, trace)
    }

    /// Forward pass returning unit-norm embeddings and the trace backward needs.
    pub fn forward(&self, x: &Mat) -> Result<(Mat, ForwardTrace)> {
        self.check_input(x)?;
        Ok(self.forward_serial(x))
    }

    /// Row-parallel forward over `threads` worker threads. Rows are
    /// independent, so the result is identical to the serial pass.
    pub fn forward_threads(&self, x: &Mat, threads: usize) -> Result<(Mat, ForwardTrace)> {
        self.check_input(x)?;
        if threads <= 1 || x.rows() < 2 * threads {
            return Ok(self.forward_serial(x));
        }
        let ranges = row_ranges(x.rows(), threads);
        let parts: Vec<(Mat, ForwardTrace)> = std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|r| {
                    let chunk = x.gather_rows(&(r.start..r.end).collect::<Vec<_>>());
                    scope.spawn(move || self.forward_serial(&chunk))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("forward worker panicked")).collect()
        });
        let mut outs = Vec::with_capacity(parts.len());
        let mut traces = Vec::with_capacity(parts.len());
        for (o, t) in parts {
            outs.push(o);
            traces.push(t);
        }
        let output = concat_rows(&outs);
        let trace = ForwardTrace {
            input: x.clone(),
            hidden: (0..traces[0].hidden.len())
                .map(|l| concat_rows(&traces.iter().map(|t| t.hidden[l].clone()).collect::<Vec<_>>()))
                .collect(),
            pre_norm: concat_rows(&traces.iter().map(|t| t.pre_norm.clone()).collect::<Vec<_>>()),
            norms: traces.iter().flat_map(|t| t.norms.iter().copied()).collect(),
            output: output.clone(),
        };
        Ok((output, trace))
    }

    /// Forward without keeping a trace (gallery/evaluation path).
    pub fn forward_eval(&self, x: &Mat) -> Result<Mat> {
        self.check_input(x)?;
        Ok(self.forward_serial(x).0)
    }

    pub fn forward_eval_threads(&self, x: &Mat, threads: usize) -> Result<Mat> {
        Ok(self.forward_threads(x, threads)?.0)
    }

    fn backward_serial(&self, trace: &ForwardTrace, d_out: &Mat) -> (Gradients, Mat) {
        let batch = trace.batch_size();
        let n_layers = self.layers.len();

        // Through the normalization: du = (d - (d.e)e)/|u| per row.
        let mut d_z = Mat::zeros(batch, self.output_dim());
        for r in 0..batch {
            let d = d_out.row(r);
            let e = trace.output.row(r);
            let proj = dot(d, e);
            let inv = 1.0 / trace.norms[r];
            for ((dz, &di), &ei) in d_z.row_mut(r).iter_mut().zip(d).zip(e) {
                *dz = (di - proj * ei) * inv;
            }
        }

        let mut grads = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            grads.push(LayerGrads { weight: Mat::zeros(0, 0), bias: Vec::new() });
        }
        let mut d_x = Mat::zeros(0, 0);
        for l in (0..n_layers).rev() {
            let input_act = if l == 0 { &trace.input } else { &trace.hidden[l - 1] };
            let g_w = d_z.matmul_tn(input_act);
            let mut g_b = vec![0.0; self.layers[l].bias.len()];
            for r in 0..batch {
                axpy(1.0, d_z.row(r), &mut g_b);
            }
            let d_act = d_z.matmul_nn(&self.layers[l].weight);
            grads[l] = LayerGrads { weight: g_w, bias: g_b };
            if l == 0 {
                d_x = d_act;
            } else {
                // Rectifier gate: zero where the stored activation is zero.
                let mut next = d_act;
                let gate = &trace.hidden[l - 1];
                for (v, &a) in next.data_mut().iter_mut().zip(gate.data()) {
                    if a <= 0.0 {
                        *v = 0.0;
                    }
                }
                d_z = next;
            }
        }
        (Gradients { layers: grads }, d_x)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the normalized embeddings)
    /// through the net; returns parameter gradients and the input gradient.
    pub fn backward(&self, trace: &ForwardTrace, d_out: &Mat) -> Result<(Gradients, Mat)> {
        if d_out.rows() != trace.batch_size() || d_out.cols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                d_out.rows(),
                d_out.cols(),
                trace.batch_size(),
                self.output_dim()
            )));
        }
        Ok(self.backward_serial(trace, d_out))
    }

    /// Row-parallel backward: each worker handles a contiguous row range and
    /// partial parameter gradients are reduced in fixed chunk order.
    pub fn backward_threads(
        &self,
        trace: &ForwardTrace,
        d_out: &Mat,
        threads: usize,
    ) -> Result<(Gradients, Mat)> {
        if threads <= 1 || trace.batch_size() < 2 * threads {
            return self.backward(trace, d_out);
        }
        if d_out.rows() != trace.batch_size() || d_out.cols() != self.output_dim() {
            return Err(Error::Shape("upstream gradient shape".into()));
        }
        let ranges = row_ranges(trace.batch_size(), threads);
        let parts: Vec<(Gradients, Mat)> = std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|r| {
                    let rows: Vec<usize> = (r.start..r.end).collect();
                    let sub_trace = ForwardTrace {
                        input: trace.input.gather_rows(&rows),
                        hidden: trace.hidden.iter().map(|h| h.gather_rows(&rows)).collect(),
                        pre_norm: trace.pre_norm.gather_rows(&rows),
                        norms: rows.iter().map(|&i| trace.norms[i]).collect(),
                        output: trace.output.gather_rows(&rows),
                    };
                    let sub_d = d_out.gather_rows(&rows);
                    scope.spawn(move || self.backward_serial(&sub_trace, &sub_d))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("backward worker panicked")).collect()
        });
        let mut total = Gradients::zeros_like(self);
        let mut dx_parts = Vec::with_capacity(parts.len());
        for (g, dx) in parts {
            total.add_assign(&g);
            dx_parts.push(dx);
        }
        Ok((total, concat_rows(&dx_parts)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binio::write_magic(&mut w, NET_MAGIC)?;
        binio::write_u32(&mut w, NET_VERSION)?;
        binio::write_u32(&mut w, self.dims.len() as u32)?;
        for &d in &self.dims {
            binio::write_u32(&mut w, d as u32)?;
        }
        for layer in &self.layers {
            binio::write_f64_slice(&mut w, layer.weight.data())?;
            binio::write_f64_slice(&mut w, &layer.bias)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbedNet> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, NET_MAGIC, "net checkpoint")?;
        let version = binio::read_u32(&mut r)?;
        if version != NET_VERSION {
            return Err(Error::Format(format!("unsupported net version {version}")));
        }
        let n_dims = binio::read_u32(&mut r)? as usize;
        if n_dims < 2 {
            return Err(Error::Format("net checkpoint with fewer than 2 dims".into()));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(binio::read_u32(&mut r)? as usize);
        }
        let mut layers = Vec::with_capacity(n_dims - 1);
        for l in 0..n_dims - 1 {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let wdata = binio::read_f64_vec(&mut r, d_out * d_in)?;
            let bias = binio::read_f64_vec(&mut r, d_out)?;
            layers.push(DenseLayer { weight: Mat::from_vec(d_out, d_in, wdata), bias });
        }
        Ok(EmbedNet { dims, layers })
    }
}

fn linear(x: &Mat, layer: &DenseLayer) -> Mat {
    let mut z = x.matmul_nt(&layer.weight);
    for r in 0..z.rows() {
        axpy(1.0, &layer.bias, z.row_mut(r));
    }
    z
}

fn row_ranges(rows: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.min(rows).max(1);
    let base = rows / parts;
    let extra = rows % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn concat_rows(mats: &[Mat]) -> Mat {
    let cols = mats[0].cols();
    let rows = mats.iter().map(Mat::rows).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for m in mats {
        for i in 0..m.rows() {
            out.row_mut(r).copy_from_slice(m.row(i));
            r += 1;
        }
    }
    out
}

/// Heavy-ball SGD velocity buffers, shape-matched to one net.
#[derive(Clone, Debug)]
pub struct SgdState {
    vel: Vec<LayerGrads>,
}

impl SgdState {
    pub fn new(net: &EmbedNet) -> SgdState {
        SgdState { vel: Gradients::zeros_like(net).layers }
    }
}

/// v <- momentum*v + grad + weight_decay*p; p <- p - lr*v.
pub fn sgd_update(
    net: &mut EmbedNet,
    state: &mut SgdState,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::Shape("gradient/net layer count mismatch".into()));
    }
    if lr <= 0.0 {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    for ((layer, vel), g) in net.layers.iter_mut().zip(&mut state.vel).zip(&grads.layers) {
        if g.weight.rows() != layer.weight.rows() || g.weight.cols() != layer.weight.cols() {
            return Err(Error::Shape("gradient/layer shape mismatch".into()));
        }
        for ((p, v), gr) in
            layer.weight.data_mut().iter_mut().zip(vel.weight.data_mut()).zip(g.weight.data())
        {
            *v = momentum * *v + gr + weight_decay * *p;
            *p -= lr * *v;
        }
        for ((p, v), gr) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
            *v = momentum * *v + gr + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Moving-average parameter transfer: gallery <- m*gallery + (1-m)*probe.
pub fn momentum_sync(gallery: &mut EmbedNet, probe: &EmbedNet, m: f64) -> Result<()> {
    if gallery.dims != probe.dims {
        return Err(Error::Shape(format!(
            "net dims differ: {:?} vs {:?}",
            gallery.dims, probe.dims
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum coefficient {m} outside [0, 1]")));
    }
    for (g, p) in gallery.layers.iter_mut().zip(&probe.layers) {
        for (gv, pv) in g.weight.data_mut().iter_mut().zip(p.weight.data()) {
            *gv = m * *gv + (1.0 - m) * pv;
        }
        for (gv, pv) in g.bias.iter_mut().zip(&p.bias) {
            *gv = m * *gv + (1.0 - m) * pv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::l2_norm;

    fn random_input(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = Rng::new(seed);
        let mut m = Mat::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.normal();
        }
        m
    }

    /// Scalar objective sum(g . e) for finite-difference checks.
    fn scalar_loss(net: &EmbedNet, x: &Mat, g: &Mat) -> f64 {
        let e = net.forward_eval(x).unwrap();
        let mut s = 0.0;
        for r in 0..e.rows() {
            s += dot(g.row(r), e.row(r));
        }
        s
    }

    #[test]
    fn param_count_by_direct_summation() {
        let net = EmbedNet::init(&[32, 64, 64, 16], 0).unwrap();
        assert_eq!(net.param_count(), 32 * 64 + 64 + 64 * 64 + 64 + 64 * 16 + 16);
        assert_eq!(net.param_count(), 7312);
    }

    #[test]
    fn init_deterministic() {
        let a = EmbedNet::init(&[8, 16, 4], 99).unwrap();
        let b = EmbedNet::init(&[8, 16, 4], 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(EmbedNet::init(&[8], 0).is_err());
        assert!(EmbedNet::init(&[8, 0, 4], 0).is_err());
    }

    #[test]
    fn identity_layer_normalizes() {
        let mut net = EmbedNet::init(&[2, 2], 0).unwrap();
        let w = net.layers_mut();
        w[0].weight = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        w[0].bias = vec![0.0, 0.0];
        let x = Mat::from_vec(1, 2, vec![3.0, 4.0]);
        let e = net.forward_eval(&x).unwrap();
        assert!((e.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((e.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rows_always_unit_norm() {
        let net = EmbedNet::init(&[6, 12, 5], 3).unwrap();
        let x = random_input(9, 6, 4);
        let e = net.forward_eval(&x).unwrap();
        for r in 0..e.rows() {
            assert!((l2_norm(e.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn row_independence() {
        let net = EmbedNet::init(&[5, 8, 3], 6).unwrap();
        let x = random_input(8, 5, 7);
        let full = net.forward_eval(&x).unwrap();
        let single = net.forward_eval(&x.gather_rows(&[4])).unwrap();
        assert_eq!(full.row(4), single.row(0));
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let net = EmbedNet::init(&[3, 2], 0).unwrap();
        let mut x = Mat::zeros(1, 3);
        x.set(0, 1, f64::NAN);
        assert!(matches!(net.forward(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = EmbedNet::init(&[4, 6, 3], 1).unwrap();
        let x = random_input(5, 4, 2);
        let (_, trace) = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&trace, &Mat::zeros(5, 3)).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
        assert_eq!(dx.max_abs(), 0.0);
    }

    #[test]
    fn radial_upstream_gradient_vanishes() {
        // d_out parallel to the embedding rowwise is annihilated by the
        // normalization Jacobian.
        let net = EmbedNet::init(&[4, 4], 5).unwrap();
        let x = random_input(3, 4, 8);
        let (e, trace) = net.forward(&x).unwrap();
        let (grads, dx) = net.backward(&trace, &e).unwrap();
        assert!(grads.max_abs() < 1e-12, "grads {}", grads.max_abs());
        assert!(dx.max_abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dims = [5usize, 9, 4];
        for seed in 0..4u64 {
            let net = EmbedNet::init(&dims, seed).unwrap();
            let x = random_input(3, 5, seed + 100);
            let g = random_input(3, 4, seed + 200);
            let (_, trace) = net.forward(&x).unwrap();
            let (grads, dx) = net.backward(&trace, &g).unwrap();

            let h = 1e-6;
            let mut max_rel: f64 = 0.0;
            // Weights and biases.
            for l in 0..net.layers().len() {
                let (rows, cols) = (net.layers()[l].weight.rows(), net.layers()[l].weight.cols());
                for r in 0..rows {
                    for c in 0..cols {
                        let mut plus = net.clone();
                        let mut minus = net.clone();
                        let v = net.layers()[l].weight.get(r, c);
                        plus.layers_mut()[l].weight.set(r, c, v + h);
                        minus.layers_mut()[l].weight.set(r, c, v - h);
                        let num = (scalar_loss(&plus, &x, &g) - scalar_loss(&minus, &x, &g))
                            / (2.0 * h);
                        let ana = grads.layers[l].weight.get(r, c);
                        max_rel = max_rel.max((num - ana).abs());
                    }
                }
                for b in 0..net.layers()[l].bias.len() {
                    let mut plus = net.clone();
                    let mut minus = net.clone();
                    plus.layers_mut()[l].bias[b] += h;
                    minus.layers_mut()[l].bias[b] -= h;
                    let num =
                        (scalar_loss(&plus, &x, &g) - scalar_loss(&minus, &x, &g)) / (2.0 * h);
                    let ana = grads.layers[l].bias[b];
                    max_rel = max_rel.max((num - ana).abs());
                }
            }
            // Inputs.
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp.set(r, c, x.get(r, c) + h);
                    xm.set(r, c, x.get(r, c) - h);
                    let num = (scalar_loss(&net, &xp, &g) - scalar_loss(&net, &xm, &g)) / (2.0 * h);
                    max_rel = max_rel.max((num - dx.get(r, c)).abs());
                }
            }
            let scale = grads.max_abs().max(dx.max_abs()).max(1e-12);
            assert!(
                max_rel / scale <= 1e-6,
                "seed {seed}: rel err {} exceeds 1e-6",
                max_rel / scale
            );
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut net = EmbedNet::init(&[2, 2], 0).unwrap();
        let before = net.layers()[0].weight.clone();
        let mut st = SgdState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].weight.set(0, 0, 2.0);
        sgd_update(&mut net, &mut st, &grads, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(net.layers()[0].weight.get(0, 0), before.get(0, 0) - 1.0);
        assert_eq!(net.layers()[0].weight.get(1, 1), before.get(1, 1));
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut net = EmbedNet::init(&[3, 4, 2], 1).unwrap();
        let before = net.clone();
        let mut st = SgdState::new(&net);
        let grads = Gradients::zeros_like(&net);
        for _ in 0..5 {
            sgd_update(&mut net, &mut st, &grads, 0.1, 0.9, 0.0).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_velocity_accumulates() {
        // Two steps with momentum: p2 = p0 - lr*g - lr*(m*g + g).
        let mut net = EmbedNet::init(&[1, 1], 0).unwrap();
        net.layers_mut()[0].weight.set(0, 0, 1.0);
        net.layers_mut()[0].bias[0] = 0.0;
        let mut st = SgdState::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].weight.set(0, 0, 1.0);
        sgd_update(&mut net, &mut st, &grads, 0.1, 0.5, 0.0).unwrap();
        assert!((net.layers()[0].weight.get(0, 0) - 0.9).abs() < 1e-15);
        sgd_update(&mut net, &mut st, &grads, 0.1, 0.5, 0.0).unwrap();
        assert!((net.layers()[0].weight.get(0, 0) - (0.9 - 0.15)).abs() < 1e-15);
    }

    #[test]
    fn momentum_sync_boundaries() {
        let probe = EmbedNet::init(&[3, 5, 2], 7).unwrap();
        let mut gallery = EmbedNet::init(&[3, 5, 2], 8).unwrap();
        let orig = gallery.clone();
        momentum_sync(&mut gallery, &probe, 1.0).unwrap();
        assert_eq!(gallery, orig);
        momentum_sync(&mut gallery, &probe, 0.0).unwrap();
        assert_eq!(gallery, probe);
    }

    #[test]
    fn momentum_sync_scalar_case() {
        let mut gallery = EmbedNet::init(&[1, 1], 0).unwrap();
        let mut probe = EmbedNet::init(&[1, 1], 0).unwrap();
        gallery.layers_mut()[0].weight.set(0, 0, 1.0);
        probe.layers_mut()[0].weight.set(0, 0, 0.0);
        momentum_sync(&mut gallery, &probe, 0.999).unwrap();
        assert!((gallery.layers()[0].weight.get(0, 0) - 0.999).abs() < 1e-15);
    }

    #[test]
    fn momentum_sync_contracts_toward_probe() {
        let probe = EmbedNet::init(&[4, 6, 3], 11).unwrap();
        let mut gallery = EmbedNet::init(&[4, 6, 3], 12).unwrap();
        let m = 0.7;
        let before: Vec<f64> = gallery
            .layers()
            .iter()
            .zip(probe.layers())
            .flat_map(|(g, p)| {
                g.weight.data().iter().zip(p.weight.data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
            })
            .collect();
        momentum_sync(&mut gallery, &probe, m).unwrap();
        let after: Vec<f64> = gallery
            .layers()
            .iter()
            .zip(probe.layers())
            .flat_map(|(g, p)| {
                g.weight.data().iter().zip(p.weight.data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
            })
            .collect();
        for (b, a) in before.iter().zip(&after) {
            assert!((a - m * b).abs() < 1e-12);
        }
    }

    #[test]
    fn dims_mismatch_rejected() {
        let probe = EmbedNet::init(&[3, 2], 0).unwrap();
        let mut gallery = EmbedNet::init(&[3, 4, 2], 0).unwrap();
        assert!(momentum_sync(&mut gallery, &probe, 0.5).is_err());
    }

    #[test]
    fn threaded_forward_is_bitwise_identical() {
        let net = EmbedNet::init(&[6, 10, 4], 2).unwrap();
        let x = random_input(13, 6, 3);
        let (serial, _) = net.forward(&x).unwrap();
        for threads in [2, 3, 5] {
            let (par, _) = net.forward_threads(&x, threads).unwrap();
            assert_eq!(serial, par);
        }
    }

    #[test]
    fn threaded_backward_matches_serial() {
        let net = EmbedNet::init(&[6, 10, 4], 2).unwrap();
        let x = random_input(13, 6, 3);
        let g = random_input(13, 4, 4);
        let (_, trace) = net.forward(&x).unwrap();
        let (gs, dxs) = net.backward(&trace, &g).unwrap();
        let (gp, dxp) = net.backward_threads(&trace, &g, 3).unwrap();
        // dX rows are computed independently: bitwise equal.
        assert_eq!(dxs, dxp);
        // Parameter grads are reduced in a different order: tiny fp slack.
        for (a, b) in gs.layers.iter().zip(&gp.layers) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // And the parallel reduction itself is deterministic.
        let (gp2, _) = net.backward_threads(&trace, &g, 3).unwrap();
        for (a, b) in gp.layers.iter().zip(&gp2.layers) {
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dcpn");
        let net = EmbedNet::init(&[7, 11, 5], 42).unwrap();
        net.save(&path).unwrap();
        let back = EmbedNet::load(&path).unwrap();
        assert_eq!(net, back);
    }
}
