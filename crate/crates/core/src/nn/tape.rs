//! The computation tape: eager forward evaluation, recorded operations,
//! reverse-mode backward pass.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};

use crate::par;

pub type Tensor = ArrayD<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    /// Elementwise product with a constant mask (dropout).
    MulMask(usize, Tensor),
    /// `[N,C,H,W] + bias[C]`.
    AddBiasC(usize, usize),
    /// `x [N,K] * w [M,K]^T + b [M]`.
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// Per-sample channel affine: `y = x * (1 + scale[n,c]) + shift[n,c]`.
    Film {
        x: usize,
        scale: usize,
        shift: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    },
    AvgPool2d {
        x: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    UpsampleNearest2(usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Array2<f64>,
        inv_std: Array2<f64>,
    },
    /// Batch statistics over `(N, H, W)` per channel; training mode.
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Array1<f64>,
        inv_std: Array1<f64>,
    },
    /// Normalization with externally fixed statistics; inference mode.
    BatchNormFrozen {
        x: usize,
        gamma: usize,
        inv_std: Array1<f64>,
    },
    Silu(usize),
    Elu(usize, f64),
    LeakyRelu(usize, f64),
    Relu(usize),
    SoftmaxLast(usize),
    /// `[N,I,K] x [N,K,J] -> [N,I,J]`.
    Bmm(usize, usize),
    PermuteLast2(usize),
    Reshape {
        x: usize,
        from: Vec<usize>,
    },
    Concat {
        a: usize,
        b: usize,
        axis: usize,
    },
    /// Mean of `|pred - target|^p` over all elements.
    PNormLoss {
        pred: usize,
        target: Tensor,
        p: u8,
    },
    /// Mean cross-entropy of logits `[N,K]` against class indices.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

/// Gradients keyed by tape node.
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn mul_mask(&mut self, a: Var, mask: Tensor) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), mask.shape(), "mask shape");
        let v = &self.nodes[a.0].value * &mask;
        self.push(v, Op::MulMask(a.0, mask))
    }

    pub fn add_bias_c(&mut self, x: Var, b: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let bv = as1(&self.nodes[b.0].value);
        let (n, c, h, w) = xv.dim();
        assert_eq!(bv.len(), c, "bias length");
        let mut y = xv.to_owned();
        for ci in 0..c {
            let bias = bv[ci];
            y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v + bias);
        }
        let _ = (n, h, w);
        self.push(y.into_dyn(), Op::AddBiasC(x.0, b.0))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        assert_eq!(xv.ncols(), wv.ncols(), "linear in-features");
        let mut y = xv.dot(&wv.t());
        if let Some(bb) = b {
            let bv = as1(&self.nodes[bb.0].value);
            assert_eq!(bv.len(), wv.nrows(), "linear bias");
            for mut row in y.rows_mut() {
                row += &bv;
            }
        }
        self.push(
            y.into_dyn(),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
            },
        )
    }

    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let sv = as2(&self.nodes[scale.0].value);
        let tv = as2(&self.nodes[shift.0].value);
        let (n, c, _, _) = xv.dim();
        assert_eq!(sv.dim(), (n, c), "film scale shape");
        assert_eq!(tv.dim(), (n, c), "film shift shape");
        let mut y = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let a = 1.0 + sv[[ni, ci]];
                let b = tv[[ni, ci]];
                y.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v * a + b);
            }
        }
        self.push(
            y.into_dyn(),
            Op::Film {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
            },
        )
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Var {
        let xv = as4(&self.nodes[x.0].value).to_owned();
        let wv = as4(&self.nodes[w.0].value).to_owned();
        let bv = b.map(|bb| as1(&self.nodes[bb.0].value).to_owned());
        let y = conv2d_forward(&xv, &wv, bv.as_ref(), stride, pad, groups);
        self.push(
            y.into_dyn(),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                stride,
                pad,
                groups,
            },
        )
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize), stride: (usize, usize)) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        assert!(kh <= h && kw <= w, "pool kernel exceeds input");
        let ho = (h - kh) / sh + 1;
        let wo = (w - kw) / sw + 1;
        let inv = 1.0 / (kh * kw) as f64;
        let mut y = Array4::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                acc += xv[[ni, ci, i * sh + ki, j * sw + kj]];
                            }
                        }
                        y[[ni, ci, i, j]] = acc * inv;
                    }
                }
            }
        }
        self.push(
            y.into_dyn(),
            Op::AvgPool2d {
                x: x.0,
                kernel,
                stride,
            },
        )
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let mut y = Array4::zeros((n, c, h * 2, w * 2));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h * 2 {
                    for j in 0..w * 2 {
                        y[[ni, ci, i, j]] = xv[[ni, ci, i / 2, j / 2]];
                    }
                }
            }
        }
        self.push(y.into_dyn(), Op::UpsampleNearest2(x.0))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let gv = as1(&self.nodes[gamma.0].value).to_owned();
        let bv = as1(&self.nodes[beta.0].value).to_owned();
        let (n, c, h, w) = xv.dim();
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        let per = c / groups;
        let m = (per * h * w) as f64;
        let mut mean = Array2::zeros((n, groups));
        let mut inv_std = Array2::zeros((n, groups));
        let mut y = xv.to_owned();
        for ni in 0..n {
            for g in 0..groups {
                let slab = xv.slice(s![ni, g * per..(g + 1) * per, .., ..]);
                let mu = slab.sum() / m;
                let var = slab.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                let inv = 1.0 / (var + eps).sqrt();
                mean[[ni, g]] = mu;
                inv_std[[ni, g]] = inv;
                for ci in 0..per {
                    let cc = g * per + ci;
                    let (ga, be) = (gv[cc], bv[cc]);
                    y.slice_mut(s![ni, cc, .., ..])
                        .mapv_inplace(|v| (v - mu) * inv * ga + be);
                }
            }
        }
        self.push(
            y.into_dyn(),
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean,
                inv_std,
            },
        )
    }

    /// Training-mode batch norm. Returns the output plus the batch mean and
    /// variance so the caller can maintain running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let xv = as4(&self.nodes[x.0].value);
        let gv = as1(&self.nodes[gamma.0].value).to_owned();
        let bv = as1(&self.nodes[beta.0].value).to_owned();
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        let mut inv_std = Array1::zeros(c);
        let mut y = xv.to_owned();
        for ci in 0..c {
            let slab = xv.slice(s![.., ci, .., ..]);
            let mu = slab.sum() / m;
            let va = slab.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let inv = 1.0 / (va + eps).sqrt();
            mean[ci] = mu;
            var[ci] = va;
            inv_std[ci] = inv;
            let (ga, be) = (gv[ci], bv[ci]);
            y.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| (v - mu) * inv * ga + be);
        }
        let out = self.push(
            y.into_dyn(),
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: mean.clone(),
                inv_std,
            },
        );
        (out, mean, var)
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let gv = as1(&self.nodes[gamma.0].value).to_owned();
        let bv = as1(&self.nodes[beta.0].value).to_owned();
        let (_, c, _, _) = xv.dim();
        let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut y = xv.to_owned();
        for ci in 0..c {
            let (mu, inv, ga, be) = (running_mean[ci], inv_std[ci], gv[ci], bv[ci]);
            y.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| (v - mu) * inv * ga + be);
        }
        self.push(
            y.into_dyn(),
            Op::BatchNormFrozen {
                x: x.0,
                gamma: gamma.0,
                inv_std,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t * sigmoid(t));
        self.push(v, Op::Silu(x.0))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let v = self.nodes[x.0]
            .value
            .mapv(|t| if t > 0.0 { t } else { alpha * (t.exp() - 1.0) });
        self.push(v, Op::Elu(x.0, alpha))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.nodes[x.0]
            .value
            .mapv(|t| if t > 0.0 { t } else { slope * t });
        self.push(v, Op::LeakyRelu(x.0, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x.0))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let axis = Axis(xv.ndim() - 1);
        let mut y = xv.as_standard_layout().to_owned();
        for mut row in y.lanes_mut(axis) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(y, Op::SoftmaxLast(x.0))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = as3(&self.nodes[a.0].value);
        let bv = as3(&self.nodes[b.0].value);
        let (n, i, ka) = av.dim();
        let (nb, kb, j) = bv.dim();
        assert_eq!(n, nb, "bmm batch");
        assert_eq!(ka, kb, "bmm inner dim");
        let items = par::map_indexed(n, |ni| {
            let am = av.index_axis(Axis(0), ni);
            let bm = bv.index_axis(Axis(0), ni);
            am.dot(&bm)
        });
        let mut y = Array3::zeros((n, i, j));
        for (ni, m) in items.into_iter().enumerate() {
            y.index_axis_mut(Axis(0), ni).assign(&m);
        }
        self.push(y.into_dyn(), Op::Bmm(a.0, b.0))
    }

    pub fn permute_last2(&mut self, x: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let y = xv
            .to_owned()
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .to_owned();
        self.push(y.into_dyn(), Op::PermuteLast2(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let from = self.nodes[x.0].value.shape().to_vec();
        let y = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(y, Op::Reshape { x: x.0, from })
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let y = ndarray::concatenate(Axis(axis), &[av.view(), bv.view()])
            .expect("concat shapes");
        self.push(
            y.as_standard_layout().to_owned(),
            Op::Concat {
                a: a.0,
                b: b.0,
                axis,
            },
        )
    }

    pub fn pnorm_loss(&mut self, pred: Var, target: Tensor, p: u8) -> Var {
        assert!(p == 1 || p == 2, "p must be 1 or 2");
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.shape(), target.shape(), "loss target shape");
        let m = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(target.iter())
            .map(|(a, b)| {
                let r = a - b;
                if p == 2 {
                    r * r
                } else {
                    r.abs()
                }
            })
            .sum::<f64>()
            / m;
        let v = Tensor::from_elem(IxDyn(&[1]), loss);
        self.push(
            v,
            Op::PNormLoss {
                pred: pred.0,
                target,
                p,
            },
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = as2(&self.nodes[logits.0].value);
        let (n, k) = lv.dim();
        assert_eq!(n, targets.len(), "target count");
        let mut probs = Array2::zeros((n, k));
        let mut loss = 0.0;
        for ni in 0..n {
            let row = lv.row(ni);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (kj, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[[ni, kj]] = e;
                sum += e;
            }
            for kj in 0..k {
                probs[[ni, kj]] /= sum;
            }
            let y = targets[ni];
            assert!(y < k, "class index out of range");
            loss -= row[y] - max - sum.ln();
        }
        loss /= n as f64;
        let v = Tensor::from_elem(IxDyn(&[1]), loss);
        self.push(
            v,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from `root` (typically a scalar loss).
    pub fn backward(&self, root: Var) -> Grads {
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::from_elem(
            IxDyn(self.nodes[root.0].value.shape()),
            1.0,
        ));
        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.backprop(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { g }
    }

    fn backprop(&self, i: usize, gi: &Tensor, g: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(g, *a, gi.clone());
                acc(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                acc(g, *a, gi.clone());
                acc(g, *b, gi.mapv(|v| -v));
            }
            Op::Scale(a, c) => acc(g, *a, gi.mapv(|v| v * c)),
            Op::MulMask(a, mask) => acc(g, *a, gi * mask),
            Op::AddBiasC(x, b) => {
                acc(g, *x, gi.clone());
                let gv = as4(gi);
                let c = gv.dim().1;
                let mut db = Array1::zeros(c);
                for ci in 0..c {
                    db[ci] = gv.slice(s![.., ci, .., ..]).sum();
                }
                acc(g, *b, db.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let gv = as2(gi);
                let xv = as2(&self.nodes[*x].value);
                let wv = as2(&self.nodes[*w].value);
                acc(g, *x, gv.dot(&wv).into_dyn());
                acc(g, *w, gv.t().dot(&xv).into_dyn());
                if let Some(bb) = b {
                    acc(g, *bb, gv.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Film { x, scale, shift } => {
                let gv = as4(gi);
                let xv = as4(&self.nodes[*x].value);
                let sv = as2(&self.nodes[*scale].value);
                let (n, c, _, _) = xv.dim();
                let mut dx = gv.to_owned();
                let mut ds = Array2::zeros((n, c));
                let mut dt = Array2::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let a = 1.0 + sv[[ni, ci]];
                        dx.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|v| v * a);
                        let gs = gv.slice(s![ni, ci, .., ..]);
                        let xs = xv.slice(s![ni, ci, .., ..]);
                        ds[[ni, ci]] = gs.iter().zip(xs.iter()).map(|(a, b)| a * b).sum();
                        dt[[ni, ci]] = gs.sum();
                    }
                }
                acc(g, *x, dx.into_dyn());
                acc(g, *scale, ds.into_dyn());
                acc(g, *shift, dt.into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            } => {
                let gv = as4(gi).to_owned();
                let xv = as4(&self.nodes[*x].value).to_owned();
                let wv = as4(&self.nodes[*w].value).to_owned();
                let (dx, dw, db) = conv2d_backward(&xv, &wv, &gv, *stride, *pad, *groups);
                acc(g, *x, dx.into_dyn());
                acc(g, *w, dw.into_dyn());
                if let Some(bb) = b {
                    acc(g, *bb, db.into_dyn());
                }
            }
            Op::AvgPool2d { x, kernel, stride } => {
                let gv = as4(gi);
                let xv = as4(&self.nodes[*x].value);
                let (n, c, h, w) = xv.dim();
                let (kh, kw) = *kernel;
                let (sh, sw) = *stride;
                let (_, _, ho, wo) = gv.dim();
                let inv = 1.0 / (kh * kw) as f64;
                let mut dx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let val = gv[[ni, ci, i, j]] * inv;
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        dx[[ni, ci, i * sh + ki, j * sw + kj]] += val;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::UpsampleNearest2(x) => {
                let gv = as4(gi);
                let (n, c, h2, w2) = gv.dim();
                let mut dx = Array4::zeros((n, c, h2 / 2, w2 / 2));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                dx[[ni, ci, i / 2, j / 2]] += gv[[ni, ci, i, j]];
                            }
                        }
                    }
                }
                acc(g, *x, dx.into_dyn());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            } => {
                let gv = as4(gi);
                let xv = as4(&self.nodes[*x].value);
                let ga = as1(&self.nodes[*gamma].value);
                let (n, c, h, w) = xv.dim();
                let per = c / groups;
                let m = (per * h * w) as f64;
                let mut dx = Array4::zeros((n, c, h, w));
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                for ni in 0..n {
                    for gr in 0..*groups {
                        let mu = mean[[ni, gr]];
                        let inv = inv_std[[ni, gr]];
                        // First pass: group sums of g*gamma and g*gamma*xhat.
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ci in 0..per {
                            let cc = gr * per + ci;
                            let gs = gv.slice(s![ni, cc, .., ..]);
                            let xs = xv.slice(s![ni, cc, .., ..]);
                            for (gg, xx) in gs.iter().zip(xs.iter()) {
                                let xhat = (xx - mu) * inv;
                                let gh = gg * ga[cc];
                                s1 += gh;
                                s2 += gh * xhat;
                                dgamma[cc] += gg * xhat;
                                dbeta[cc] += gg;
                            }
                        }
                        for ci in 0..per {
                            let cc = gr * per + ci;
                            let gs = gv.slice(s![ni, cc, .., ..]);
                            let xs = xv.slice(s![ni, cc, .., ..]);
                            let mut ds = dx.slice_mut(s![ni, cc, .., ..]);
                            for ((dd, gg), xx) in ds.iter_mut().zip(gs.iter()).zip(xs.iter()) {
                                let xhat = (xx - mu) * inv;
                                let gh = gg * ga[cc];
                                *dd = inv * (gh - s1 / m - xhat * s2 / m);
                            }
                        }
                    }
                }
                acc(g, *x, dx.into_dyn());
                acc(g, *gamma, dgamma.into_dyn());
                acc(g, *beta, dbeta.into_dyn());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let gv = as4(gi);
                let xv = as4(&self.nodes[*x].value);
                let ga = as1(&self.nodes[*gamma].value);
                let (n, c, h, w) = xv.dim();
                let m = (n * h * w) as f64;
                let mut dx = Array4::zeros((n, c, h, w));
                let mut dgamma = Array1::zeros(c);
                let mut dbeta = Array1::zeros(c);
                for ci in 0..c {
                    let mu = mean[ci];
                    let inv = inv_std[ci];
                    let gs = gv.slice(s![.., ci, .., ..]);
                    let xs = xv.slice(s![.., ci, .., ..]);
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for (gg, xx) in gs.iter().zip(xs.iter()) {
                        let xhat = (xx - mu) * inv;
                        let gh = gg * ga[ci];
                        s1 += gh;
                        s2 += gh * xhat;
                        dgamma[ci] += gg * xhat;
                        dbeta[ci] += gg;
                    }
                    let mut ds = dx.slice_mut(s![.., ci, .., ..]);
                    for ((dd, gg), xx) in ds.iter_mut().zip(gs.iter()).zip(xs.iter()) {
                        let xhat = (xx - mu) * inv;
                        let gh = gg * ga[ci];
                        *dd = inv * (gh - s1 / m - xhat * s2 / m);
                    }
                }
                acc(g, *x, dx.into_dyn());
                acc(g, *gamma, dgamma.into_dyn());
                acc(g, *beta, dbeta.into_dyn());
            }
            Op::BatchNormFrozen { x, gamma, inv_std } => {
                let gv = as4(gi);
                let ga = as1(&self.nodes[*gamma].value);
                let (n, c, h, w) = gv.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                for ci in 0..c {
                    let k = ga[ci] * inv_std[ci];
                    let gs = gv.slice(s![.., ci, .., ..]);
                    let mut ds = dx.slice_mut(s![.., ci, .., ..]);
                    for (dd, gg) in ds.iter_mut().zip(gs.iter()) {
                        *dd = gg * k;
                    }
                }
                // Gamma/beta gradients are not needed in frozen mode (the
                // layer is only frozen at evaluation time).
                acc(g, *x, dx.into_dyn());
            }
            Op::Silu(x) => {
                let xv = &self.nodes[*x].value;
                let dx = ndarray::Zip::from(gi).and(xv).map_collect(|gg, xx| {
                    let s = sigmoid(*xx);
                    gg * (s + xx * s * (1.0 - s))
                });
                acc(g, *x, dx);
            }
            Op::Elu(x, alpha) => {
                let xv = &self.nodes[*x].value;
                let dx = ndarray::Zip::from(gi).and(xv).map_collect(|gg, xx| {
                    if *xx > 0.0 {
                        *gg
                    } else {
                        gg * alpha * xx.exp()
                    }
                });
                acc(g, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[*x].value;
                let dx = ndarray::Zip::from(gi)
                    .and(xv)
                    .map_collect(|gg, xx| if *xx > 0.0 { *gg } else { gg * slope });
                acc(g, *x, dx);
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let dx = ndarray::Zip::from(gi)
                    .and(xv)
                    .map_collect(|gg, xx| if *xx > 0.0 { *gg } else { 0.0 });
                acc(g, *x, dx);
            }
            Op::SoftmaxLast(x) => {
                // dx = y * (g - sum(g*y)) rowwise.
                let yv = &self.nodes[i].value;
                let axis = Axis(yv.ndim() - 1);
                let mut dx = gi.as_standard_layout().to_owned();
                for (yr, mut dr) in yv.lanes(axis).into_iter().zip(dx.lanes_mut(axis)) {
                    let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (d, y) in dr.iter_mut().zip(yr.iter()) {
                        *d = y * (*d - dot);
                    }
                }
                acc(g, *x, dx);
            }
            Op::Bmm(a, b) => {
                let gv = as3(gi);
                let av = as3(&self.nodes[*a].value);
                let bv = as3(&self.nodes[*b].value);
                let n = gv.dim().0;
                let parts = par::map_indexed(n, |ni| {
                    let gm = gv.index_axis(Axis(0), ni);
                    let am = av.index_axis(Axis(0), ni);
                    let bm = bv.index_axis(Axis(0), ni);
                    (gm.dot(&bm.t()), am.t().dot(&gm))
                });
                let mut da = Array3::zeros(av.dim());
                let mut db = Array3::zeros(bv.dim());
                for (ni, (pa, pb)) in parts.into_iter().enumerate() {
                    da.index_axis_mut(Axis(0), ni).assign(&pa);
                    db.index_axis_mut(Axis(0), ni).assign(&pb);
                }
                acc(g, *a, da.into_dyn());
                acc(g, *b, db.into_dyn());
            }
            Op::PermuteLast2(x) => {
                let gv = as3(gi);
                let dx = gv
                    .to_owned()
                    .permuted_axes([0, 2, 1])
                    .as_standard_layout()
                    .to_owned();
                acc(g, *x, dx.into_dyn());
            }
            Op::Reshape { x, from } => {
                let dx = gi
                    .clone()
                    .into_shape_with_order(IxDyn(from))
                    .expect("reshape grad");
                acc(g, *x, dx);
            }
            Op::Concat { a, b, axis } => {
                let asz = self.nodes[*a].value.shape()[*axis];
                let da = gi
                    .slice_axis(Axis(*axis), ndarray::Slice::from(0..asz))
                    .to_owned();
                let db = gi
                    .slice_axis(Axis(*axis), ndarray::Slice::from(asz..))
                    .to_owned();
                acc(g, *a, da.as_standard_layout().to_owned());
                acc(g, *b, db.as_standard_layout().to_owned());
            }
            Op::PNormLoss { pred, target, p } => {
                let pv = &self.nodes[*pred].value;
                let scale = gi.iter().next().unwrap() / pv.len() as f64;
                let dpred = ndarray::Zip::from(pv).and(target).map_collect(|a, b| {
                    let r = a - b;
                    if *p == 2 {
                        2.0 * r * scale
                    } else if r > 0.0 {
                        scale
                    } else if r < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                });
                acc(g, *pred, dpred);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = gi.iter().next().unwrap() / targets.len() as f64;
                let mut dl = probs.clone();
                for (ni, &y) in targets.iter().enumerate() {
                    dl[[ni, y]] -= 1.0;
                }
                acc(g, *logits, (dl * scale).into_dyn());
            }
        }
    }
}

fn acc(g: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut g[idx] {
        Some(t) => *t += &delta,
        slot => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn as1(t: &Tensor) -> ndarray::ArrayView1<'_, f64> {
    t.view().into_dimensionality().expect("expected 1-d tensor")
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality().expect("expected 2-d tensor")
}

fn as3(t: &Tensor) -> ArrayView3<'_, f64> {
    t.view().into_dimensionality().expect("expected 3-d tensor")
}

fn as4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality().expect("expected 4-d tensor")
}

fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

/// Lowers one input item (already sliced to a channel group) to the
/// `[cin_g*kh*kw, ho*wo]` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for i in 0..ho {
                    let si = i * sh + ki;
                    if si < ph || si >= h + ph {
                        continue;
                    }
                    let xi = si - ph;
                    for j in 0..wo {
                        let sj = j * sw + kj;
                        if sj < pw || sj >= w + pw {
                            continue;
                        }
                        col[[row, i * wo + j]] = x[[c, xi, sj - pw]];
                    }
                }
            }
        }
    }
    col
}

/// Scatters a patch-matrix gradient back to input layout.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut x = Array3::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for i in 0..ho {
                    let si = i * sh + ki;
                    if si < ph || si >= h + ph {
                        continue;
                    }
                    let xi = si - ph;
                    for j in 0..wo {
                        let sj = j * sw + kj;
                        if sj < pw || sj >= w + pw {
                            continue;
                        }
                        x[[c, xi, sj - pw]] += col[[row, i * wo + j]];
                    }
                }
            }
        }
    }
    x
}

fn weight_matrices(w: &Array4<f64>, groups: usize) -> Vec<Array2<f64>> {
    let (cout, cin_g, kh, kw) = w.dim();
    let cout_g = cout / groups;
    (0..groups)
        .map(|g| {
            w.slice(s![g * cout_g..(g + 1) * cout_g, .., .., ..])
                .to_owned()
                .into_shape_with_order((cout_g, cin_g * kh * kw))
                .unwrap()
        })
        .collect()
}

fn conv2d_forward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    groups: usize,
) -> Array4<f64> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_g, kh, kw) = w.dim();
    assert_eq!(cin_g * groups, cin, "conv group channels");
    assert!(cout % groups == 0, "conv out channels vs groups");
    let cout_g = cout / groups;
    let ho = conv_out(h, kh, sh, ph);
    let wo = conv_out(wd, kw, sw, pw);
    let wmat = weight_matrices(w, groups);
    let items = par::map_indexed(n, |ni| {
        let mut y = Array3::zeros((cout, ho, wo));
        for g in 0..groups {
            let xg = x.slice(s![ni, g * cin_g..(g + 1) * cin_g, .., ..]);
            let col = im2col(xg, kh, kw, sh, sw, ph, pw, ho, wo);
            let yg = wmat[g].dot(&col);
            let yg = yg.into_shape_with_order((cout_g, ho, wo)).unwrap();
            y.slice_mut(s![g * cout_g..(g + 1) * cout_g, .., ..])
                .assign(&yg);
        }
        if let Some(bias) = b {
            for c in 0..cout {
                y.slice_mut(s![c, .., ..]).mapv_inplace(|v| v + bias[c]);
            }
        }
        y
    });
    let mut out = Array4::zeros((n, cout, ho, wo));
    for (ni, item) in items.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), ni).assign(&item);
    }
    out
}

fn conv2d_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    dy: &Array4<f64>,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    groups: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_g, kh, kw) = w.dim();
    let cout_g = cout / groups;
    let (_, _, ho, wo) = dy.dim();
    let wmat = weight_matrices(w, groups);

    // Per-item partials, reduced afterwards in index order.
    let parts = par::map_indexed(n, |ni| {
        let mut dx_item = Array3::zeros((cin, h, wd));
        let mut dw_item = Array2::zeros((cout, cin_g * kh * kw));
        for g in 0..groups {
            let xg = x.slice(s![ni, g * cin_g..(g + 1) * cin_g, .., ..]);
            let col = im2col(xg, kh, kw, sh, sw, ph, pw, ho, wo);
            let dyg = dy
                .slice(s![ni, g * cout_g..(g + 1) * cout_g, .., ..])
                .to_owned()
                .into_shape_with_order((cout_g, ho * wo))
                .unwrap();
            let dwg = dyg.dot(&col.t());
            dw_item
                .slice_mut(s![g * cout_g..(g + 1) * cout_g, ..])
                .assign(&dwg);
            let dcol = wmat[g].t().dot(&dyg);
            let dxg = col2im(&dcol, cin_g, h, wd, kh, kw, sh, sw, ph, pw, ho, wo);
            dx_item
                .slice_mut(s![g * cin_g..(g + 1) * cin_g, .., ..])
                .assign(&dxg);
        }
        (dx_item, dw_item)
    });

    let mut dx = Array4::zeros((n, cin, h, wd));
    let mut dw_flat = Array2::zeros((cout, cin_g * kh * kw));
    for (ni, (dxi, dwi)) in parts.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), ni).assign(&dxi);
        dw_flat += &dwi;
    }
    let dw = dw_flat
        .into_shape_with_order((cout, cin_g, kh, kw))
        .unwrap();
    let mut db = Array1::zeros(cout);
    for c in 0..cout {
        db[c] = dy.slice(s![.., c, .., ..]).sum();
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, 77);
        Tensor::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = rng.sample(StandardNormal);
            z
        })
    }

    /// Central finite-difference check of every input gradient.
    fn fd_check(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let eval = |values: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.scalar(root)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        assert_eq!(tape.value(root).len(), 1, "root must be scalar");
        let grads = tape.backward(root);

        for (k, input) in inputs.iter().enumerate() {
            let g = grads
                .get(vars[k])
                .unwrap_or_else(|| panic!("missing grad for input {k}"));
            for idx in 0..input.len() {
                let x0 = input.as_slice().unwrap()[idx];
                let h = 1e-5 * (1.0 + x0.abs());
                let mut plus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[idx] = x0 + h;
                let mut minus = inputs.to_vec();
                minus[k].as_slice_mut().unwrap()[idx] = x0 - h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let got = g.as_slice().unwrap()[idx];
                let denom = fd.abs().max(got.abs()).max(1e-6);
                assert!(
                    (fd - got).abs() / denom < tol,
                    "input {k} elem {idx}: fd {fd} vs grad {got}"
                );
            }
        }
    }

    /// mean((x - t)^2) as a smooth scalar head for op tests.
    fn sq_head(tape: &mut Tape, out: Var, target_seed: u64) -> Var {
        let target = randn(tape.value(out).shape(), target_seed);
        tape.pnorm_loss(out, target, 2)
    }

    #[test]
    fn grad_add_sub_scale_mask() {
        let a = randn(&[2, 3], 1);
        let b = randn(&[2, 3], 2);
        let c = randn(&[2, 3], 50);
        let mask = randn(&[2, 3], 3);
        fd_check(&[a, b, c], |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[2]);
            let sc = t.scale(d, 1.7);
            let mk = t.mul_mask(sc, mask.clone());
            sq_head(t, mk, 9)
        }, 1e-6);
    }

    #[test]
    fn grad_linear() {
        let x = randn(&[4, 3], 4);
        let w = randn(&[5, 3], 5);
        let b = randn(&[5], 6);
        fd_check(&[x, w, b], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            sq_head(t, y, 10)
        }, 1e-6);
    }

    #[test]
    fn grad_conv2d_basic() {
        let x = randn(&[2, 3, 5, 6], 7);
        let w = randn(&[4, 3, 3, 3], 8);
        let b = randn(&[4], 9);
        fd_check(&[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 1), 1);
            sq_head(t, y, 11)
        }, 1e-5);
    }

    #[test]
    fn grad_conv2d_strided_grouped() {
        // Depthwise (groups == cin) with stride 2.
        let x = randn(&[2, 4, 6, 8], 12);
        let w = randn(&[8, 1, 3, 3], 13);
        fd_check(&[x, w], |t, v| {
            let y = t.conv2d(v[0], v[1], None, (2, 2), (1, 1), 4);
            sq_head(t, y, 14)
        }, 1e-5);
    }

    #[test]
    fn conv2d_matches_naive() {
        let x = randn(&[1, 2, 4, 5], 15);
        let w = randn(&[3, 2, 3, 3], 16);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let y = tape.conv2d(xv, wv, None, (1, 1), (1, 1), 1);
        let yv = as4(tape.value(y));
        let x4 = as4(&x);
        let w4 = as4(&w);
        for co in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let ii = (i + ki) as isize - 1;
                                let jj = (j + kj) as isize - 1;
                                if ii >= 0 && ii < 4 && jj >= 0 && jj < 5 {
                                    acc += x4[[0, ci, ii as usize, jj as usize]]
                                        * w4[[co, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    let got = yv[[0, co, i, j]];
                    assert!((acc - got).abs() < 1e-12, "({co},{i},{j}): {acc} vs {got}");
                }
            }
        }
    }

    #[test]
    fn grad_pool_and_upsample() {
        let x = randn(&[2, 3, 4, 6], 17);
        fd_check(&[x.clone()], |t, v| {
            let y = t.avg_pool2d(v[0], (2, 2), (2, 2));
            sq_head(t, y, 18)
        }, 1e-6);
        fd_check(&[x], |t, v| {
            let y = t.upsample_nearest2(v[0]);
            sq_head(t, y, 19)
        }, 1e-6);
    }

    #[test]
    fn grad_group_norm() {
        let x = randn(&[2, 4, 3, 3], 20);
        let gamma = randn(&[4], 21);
        let beta = randn(&[4], 22);
        fd_check(&[x, gamma, beta], |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5);
            sq_head(t, y, 23)
        }, 1e-5);
    }

    #[test]
    fn grad_batch_norm() {
        let x = randn(&[3, 2, 2, 4], 24);
        let gamma = randn(&[2], 25);
        let beta = randn(&[2], 26);
        fd_check(&[x, gamma, beta], |t, v| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5);
            sq_head(t, y, 27)
        }, 1e-5);
    }

    #[test]
    fn grad_film_and_bias() {
        let x = randn(&[2, 3, 2, 2], 28);
        let s = randn(&[2, 3], 29);
        let b = randn(&[2, 3], 30);
        let bias = randn(&[3], 31);
        fd_check(&[x, s, b, bias], |t, v| {
            let y = t.film(v[0], v[1], v[2]);
            let y = t.add_bias_c(y, v[3]);
            sq_head(t, y, 32)
        }, 1e-6);
    }

    #[test]
    fn grad_activations() {
        let x = randn(&[3, 7], 33);
        fd_check(&[x.clone()], |t, v| {
            let y = t.silu(v[0]);
            sq_head(t, y, 34)
        }, 1e-6);
        fd_check(&[x.clone()], |t, v| {
            let y = t.elu(v[0], 1.0);
            sq_head(t, y, 35)
        }, 1e-5);
        fd_check(&[x.clone()], |t, v| {
            let y = t.leaky_relu(v[0], 0.01);
            sq_head(t, y, 36)
        }, 1e-5);
        fd_check(&[x], |t, v| {
            let y = t.relu(v[0]);
            sq_head(t, y, 37)
        }, 1e-5);
    }

    #[test]
    fn grad_attention_composite() {
        // softmax(q^T k) value mixing, the shape used by the attention block.
        let q = randn(&[2, 3, 4], 38);
        let k = randn(&[2, 3, 4], 39);
        let vv = randn(&[2, 3, 4], 40);
        fd_check(&[q, k, vv], |t, v| {
            let qt = t.permute_last2(v[0]);
            let scores = t.bmm(qt, v[1]);
            let scaled = t.scale(scores, 1.0 / (3.0f64).sqrt());
            let attn = t.softmax_last(scaled);
            let at = t.permute_last2(attn);
            let out = t.bmm(v[2], at);
            sq_head(t, out, 41)
        }, 1e-5);
    }

    #[test]
    fn grad_concat_reshape() {
        let a = randn(&[2, 2, 2, 3], 42);
        let b = randn(&[2, 3, 2, 3], 43);
        fd_check(&[a, b], |t, v| {
            let y = t.concat(v[0], v[1], 1);
            let y = t.reshape(y, &[2, 30]);
            sq_head(t, y, 44)
        }, 1e-6);
    }

    #[test]
    fn grad_losses() {
        let pred = randn(&[2, 5], 45);
        let target = randn(&[2, 5], 46);
        fd_check(&[pred.clone()], |t, v| t.pnorm_loss(v[0], target.clone(), 2), 1e-6);
        fd_check(&[pred.clone()], |t, v| t.pnorm_loss(v[0], target.clone(), 1), 1e-5);
        let logits = randn(&[4, 3], 47);
        fd_check(&[logits], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1]), 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randn(&[3, 4, 5], 48);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.softmax_last(v);
        for row in tape.value(y).lanes(Axis(2)) {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let x = randn(&[2, 2, 2, 2], 49);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let gamma = tape.leaf(Tensor::from_elem(IxDyn(&[2]), 1.0));
        let beta = tape.leaf(Tensor::zeros(IxDyn(&[2])));
        let rm = Array1::from_vec(vec![0.5, -0.5]);
        let rv = Array1::from_vec(vec![2.0, 0.5]);
        let y = tape.batch_norm_eval(xv, gamma, beta, &rm, &rv, 1e-5);
        let yv = as4(tape.value(y));
        let x4 = as4(&x);
        for n in 0..2 {
            for c in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let expect = (x4[[n, c, i, j]] - rm[c]) / (rv[c] + 1e-5).sqrt();
                        assert!((yv[[n, c, i, j]] - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
