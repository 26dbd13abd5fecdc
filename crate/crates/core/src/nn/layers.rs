//! Convolution, fully connected and activation layers with explicit backward passes.
//!
//! Layers are immutable during a forward/backward pass: gradients go into a
//! caller-owned buffer laid out like [`Sequential::params`], so one network
//! can serve several examples at once.

use rand::Rng;

use super::tensor::{shape_err, NnError, Tensor};

/// Zero padding `(before, after)` that keeps the spatial size for kernel `k`.
/// Even kernels put the extra row/column after.
pub fn same_padding(k: usize) -> (usize, usize) {
    let before = (k - 1) / 2;
    (before, k - 1 - before)
}

/// 2-D cross-correlation with "same" zero padding and stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][k][k]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize), NnError> {
        match *x.shape() {
            [c, h, w] if c == self.in_channels => {
                if self.kernel > h + self.kernel - 1 || self.kernel > w + self.kernel - 1 {
                    return shape_err("kernel larger than padded input");
                }
                Ok((h, w))
            }
            _ => shape_err(format!(
                "conv expects [{}, H, W], got {:?}",
                self.in_channels,
                x.shape()
            )),
        }
    }

    /// Unfold the padded input into `[in*k*k][h*w]` patches.
    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let (pt, _) = same_padding(k);
        let hw = h * w;
        let mut cols = vec![0.0; self.fan_in() * hw];
        for c in 0..self.in_channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for u in 0..k {
                for v in 0..k {
                    let row = &mut cols[((c * k + u) * k + v) * hw..][..hw];
                    for i in 0..h {
                        let si = i as isize + u as isize - pt as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = &plane[si as usize * w..(si as usize + 1) * w];
                        let dst = &mut row[i * w..(i + 1) * w];
                        for j in 0..w {
                            let sj = j as isize + v as isize - pt as isize;
                            if sj >= 0 && sj < w as isize {
                                dst[j] = src[sj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let (pt, _) = same_padding(k);
        let hw = h * w;
        let mut x = vec![0.0; self.in_channels * hw];
        for c in 0..self.in_channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for u in 0..k {
                for v in 0..k {
                    let row = &cols[((c * k + u) * k + v) * hw..][..hw];
                    for i in 0..h {
                        let si = i as isize + u as isize - pt as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        for j in 0..w {
                            let sj = j as isize + v as isize - pt as isize;
                            if sj >= 0 && sj < w as isize {
                                plane[si as usize * w + sj as usize] += row[i * w + j];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (h, w) = self.check_input(x)?;
        let hw = h * w;
        let cols = self.im2col(x.data(), h, w);
        let fan = self.fan_in();
        let mut out = vec![0.0; self.out_channels * hw];
        for (o, dst) in out.chunks_mut(hw).enumerate() {
            dst.fill(self.bias[o]);
        }
        // Four output planes per pass so each patch row is loaded once.
        for (blk, dst) in out.chunks_mut(4 * hw).enumerate() {
            let o0 = blk * 4;
            let n = dst.len() / hw;
            if n == 4 {
                let (d0, rest) = dst.split_at_mut(hw);
                let (d1, rest) = rest.split_at_mut(hw);
                let (d2, d3) = rest.split_at_mut(hw);
                for r in 0..fan {
                    let src = &cols[r * hw..(r + 1) * hw];
                    let w0 = self.weight[o0 * fan + r];
                    let w1 = self.weight[(o0 + 1) * fan + r];
                    let w2 = self.weight[(o0 + 2) * fan + r];
                    let w3 = self.weight[(o0 + 3) * fan + r];
                    for j in 0..hw {
                        let sv = src[j];
                        d0[j] += w0 * sv;
                        d1[j] += w1 * sv;
                        d2[j] += w2 * sv;
                        d3[j] += w3 * sv;
                    }
                }
            } else {
                for (k, d) in dst.chunks_mut(hw).enumerate() {
                    let wrow = &self.weight[(o0 + k) * fan..(o0 + k + 1) * fan];
                    for (r, &wv) in wrow.iter().enumerate() {
                        let src = &cols[r * hw..(r + 1) * hw];
                        for (dv, sv) in d.iter_mut().zip(src) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.out_channels, h, w], out)
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Result<Tensor, NnError> {
        let (h, w) = self.check_input(x)?;
        let hw = h * w;
        if grad_out.shape() != [self.out_channels, h, w] {
            return shape_err(format!(
                "conv grad expects [{}, {h}, {w}], got {:?}",
                self.out_channels,
                grad_out.shape()
            ));
        }
        let cols = self.im2col(x.data(), h, w);
        let fan = self.fan_in();
        let g = grad_out.data();
        let mut dcols = vec![0.0; fan * hw];
        for (o, go) in g.chunks(hw).enumerate() {
            grad_bias[o] += go.iter().sum::<f64>();
        }
        for r in 0..fan {
            let c = &cols[r * hw..(r + 1) * hw];
            let dc = &mut dcols[r * hw..(r + 1) * hw];
            for o in 0..self.out_channels {
                let go = &g[o * hw..(o + 1) * hw];
                grad_weight[o * fan + r] += dot(c, go);
                let wv = self.weight[o * fan + r];
                for (d, gv) in dc.iter_mut().zip(go) {
                    *d += wv * gv;
                }
            }
        }
        Tensor::new(vec![self.in_channels, h, w], self.col2im(&dcols, h, w))
    }
}

/// Dot product with independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Convolution with an explicit kernel tensor `[out, in, k, k]`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &[f64]) -> Result<Tensor, NnError> {
    let &[out_c, in_c, k, k2] = kernels.shape() else {
        return shape_err(format!("kernels must be 4-D, got {:?}", kernels.shape()));
    };
    if k != k2 {
        return shape_err("kernels must be square");
    }
    if bias.len() != out_c {
        return shape_err(format!("bias has {} values for {out_c} kernels", bias.len()));
    }
    let conv = Conv2d {
        in_channels: in_c,
        out_channels: out_c,
        kernel: k,
        weight: kernels.data().to_vec(),
        bias: bias.to_vec(),
    };
    conv.forward(input)
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.len() != self.inputs || x.shape().len() != 1 {
            return shape_err(format!(
                "dense expects [{}], got {:?}",
                self.inputs,
                x.shape()
            ));
        }
        let xs = x.data();
        let out = (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(xs).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        Ok(Tensor::from_vec(out))
    }

    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Result<Tensor, NnError> {
        if x.len() != self.inputs || grad_out.len() != self.outputs {
            return shape_err(format!(
                "dense {}->{} backward got input {:?}, grad {:?}",
                self.inputs,
                self.outputs,
                x.shape(),
                grad_out.shape()
            ));
        }
        let xs = x.data();
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in grad_out.data().iter().enumerate() {
            grad_bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad_weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * xs[i];
                dx[i] += row[i] * g;
            }
        }
        Ok(Tensor::from_vec(dx))
    }
}

/// NaN passes through so divergence stays visible.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v < 0.0 { 0.0 } else { v })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Relu,
    Flatten,
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Conv2d(c) => c.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::Relu => Ok(relu(x)),
            Layer::Flatten => x.clone().reshape(vec![x.len()]),
        }
    }

    fn param_groups(&self) -> usize {
        match self {
            Layer::Conv2d(_) | Layer::Dense(_) => 2,
            Layer::Relu | Layer::Flatten => 0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }
}

/// A feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// He-style uniform initialization scaled by fan-in; biases start at zero.
    pub fn init_he_uniform(&mut self, rng: &mut impl Rng) {
        for layer in &mut self.layers {
            let (weight, bias, fan_in) = match layer {
                Layer::Conv2d(c) => {
                    let fan = c.fan_in();
                    (&mut c.weight, &mut c.bias, fan)
                }
                Layer::Dense(d) => (&mut d.weight, &mut d.bias, d.inputs),
                _ => continue,
            };
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in weight.iter_mut() {
                *w = rng.gen_range(-limit..limit);
            }
            bias.fill(0.0);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = layer.forward(&a)?;
        }
        Ok(a)
    }

    /// Activations `[input, after layer 1, ..., output]`.
    pub fn forward_trace(&self, x: Tensor) -> Result<Vec<Tensor>, NnError> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Backpropagate `grad_out` through a trace from [`Self::forward_trace`],
    /// accumulating into `grads` (layout of [`Self::params`]).
    pub fn backward(
        &self,
        acts: &[Tensor],
        grad_out: Tensor,
        grads: &mut [Vec<f64>],
    ) -> Result<Tensor, NnError> {
        if acts.len() != self.layers.len() + 1 {
            return shape_err("trace does not match network depth");
        }
        let mut slot = grads.len();
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts[i];
            g = match layer {
                Layer::Conv2d(c) => {
                    slot -= 2;
                    let (gw, gb) = grads[slot..].split_at_mut(1);
                    c.backward(x, &g, &mut gw[0], &mut gb[0])?
                }
                Layer::Dense(d) => {
                    slot -= 2;
                    let (gw, gb) = grads[slot..].split_at_mut(1);
                    d.backward(x, &g, &mut gw[0], &mut gb[0])?
                }
                Layer::Relu => {
                    let mut gd = g.into_data();
                    for (gv, xv) in gd.iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    Tensor::new(x.shape().to_vec(), gd)?
                }
                Layer::Flatten => g.reshape(x.shape().to_vec())?,
            };
        }
        Ok(g)
    }

    /// Parameter groups in layer order: weight then bias for each layer.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => out.extend([c.weight.as_slice(), c.bias.as_slice()]),
                Layer::Dense(d) => out.extend([d.weight.as_slice(), d.bias.as_slice()]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => out.extend([c.weight.as_mut_slice(), c.bias.as_mut_slice()]),
                Layer::Dense(d) => out.extend([d.weight.as_mut_slice(), d.bias.as_mut_slice()]),
                _ => {}
            }
        }
        out
    }

    pub fn param_group_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.param_groups() == 2 {
                out.push(format!("{prefix}{i}.{}.weight", layer.kind()));
                out.push(format!("{prefix}{i}.{}.bias", layer.kind()));
            }
        }
        out
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Sign pattern of every ReLU input, used to detect kink crossings.
    pub fn relu_pattern(&self, x: &Tensor) -> Result<Vec<bool>, NnError> {
        let acts = self.forward_trace(x.clone())?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                out.extend(acts[i].data().iter().map(|&v| v > 0.0));
            }
        }
        Ok(out)
    }
}
