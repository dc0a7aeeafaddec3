//! Define-by-run reverse-mode differentiation over `ndarray` f64 arrays.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! a backward closure; [`Graph::backward`] walks the tape in reverse insertion
//! order (a valid topological order by construction) and accumulates gradients
//! into the leaves created with [`Graph::leaf`].
//!
//! Everything runs at 64-bit precision. Shape errors inside the tape are
//! programming errors and panic; modules validate user-facing inputs before
//! they reach the tape.

use ndarray::{ArrayD, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    // true when some leaf with requires_grad is reachable through this node
    active: bool,
    kind: &'static str,
    label: Option<String>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    by_id: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `v`, if any reached it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_id.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.by_id.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar payload of a 0-d node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert!(a.ndim() == 0, "scalar_value on non-scalar node");
        a[[]]
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
        kind: &'static str,
        label: Option<String>,
    ) -> Var {
        let active = requires_grad || parents.iter().any(|p| self.nodes[p.0].active);
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
            active,
            kind,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, true, "leaf", None)
    }

    /// Leaf treated as a constant (no gradient).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, false, "const", None)
    }

    /// Values of all row-softmax nodes recorded so far, with their labels.
    /// Every normalized attention in the model goes through `softmax_rows`,
    /// so this is a complete inventory for normalization checks.
    pub fn softmax_nodes(&self) -> Vec<(String, ArrayD<f64>)> {
        self.nodes
            .iter()
            .filter(|n| n.kind == "softmax_rows")
            .map(|n| {
                (
                    n.label.clone().unwrap_or_else(|| "softmax".into()),
                    n.value.clone(),
                )
            })
            .collect()
    }

    /// Reverse pass from a 0-d scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert!(
            self.nodes[root.0].value.ndim() == 0,
            "backward root must be a scalar"
        );
        let mut by_id: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        by_id[root.0] = Some(scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.active {
                by_id[id] = None;
                continue;
            }
            let Some(grad_out) = by_id[id].clone() else {
                continue;
            };
            if let Some(bf) = &node.backward {
                let parent_grads = bf(&grad_out);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].active {
                        continue;
                    }
                    assert_eq!(
                        pg.shape(),
                        self.nodes[p.0].value.shape(),
                        "gradient shape mismatch flowing into {} node",
                        self.nodes[p.0].kind
                    );
                    match &mut by_id[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            if !node.requires_grad {
                by_id[id] = None;
            }
        }
        Grads { by_id }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = va + vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
            false,
            "add",
            None,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = va - vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.mapv(|x| -x)])),
            false,
            "sub",
            None,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = &va * &vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g * &vb, g * &va])),
            false,
            "mul",
            None,
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a).clone(), self.value(b).clone());
        assert_eq!(va.shape(), vb.shape(), "div shape mismatch");
        let out = &va / &vb;
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g / &vb, -(g * &va) / (&vb * &vb)])),
            false,
            "div",
            None,
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| c * x);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.mapv(|x| c * x)])),
            false,
            "scale",
            None,
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.clone()])),
            false,
            "add_scalar",
            None,
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(crate::tape::sigmoid_f);
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g * &y.mapv(|s| s * (1.0 - s))])),
            false,
            "sigmoid",
            None,
        )
    }

    /// GELU in its tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let out = va.mapv(gelu_f);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g * &va.mapv(gelu_df)])),
            false,
            "gelu",
            None,
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old_shape: Vec<usize> = va.shape().to_vec();
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let out = va
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward")]
            })),
            false,
            "reshape",
            None,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2, "transpose expects 2-d");
        let out = va.t().to_owned();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.t().to_owned()])),
            false,
            "transpose",
            None,
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let va = self.value(a);
        assert!(va.ndim() == 2 && r0 <= r1 && r1 <= va.shape()[0]);
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        let out = va
            .slice(ndarray::s![r0..r1, ..].as_ref())
            .to_owned()
            .into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&[rows, cols]));
                da.slice_mut(ndarray::s![r0..r1, ..].as_ref()).assign(g);
                vec![da]
            })),
            false,
            "slice_rows",
            None,
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let va = self.value(a);
        assert!(va.ndim() == 2 && c0 <= c1 && c1 <= va.shape()[1]);
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        let out = va
            .slice(ndarray::s![.., c0..c1].as_ref())
            .to_owned()
            .into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&[rows, cols]));
                da.slice_mut(ndarray::s![.., c0..c1].as_ref()).assign(g);
                vec![da]
            })),
            false,
            "slice_cols",
            None,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0])[1];
        let row_counts: Vec<usize> = parts.iter().map(|p| self.shape(*p)[0]).collect();
        let total: usize = row_counts.iter().sum();
        let mut out = ArrayD::zeros(IxDyn(&[total, cols]));
        let mut r = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.shape()[1], cols, "concat_rows column mismatch");
            out.slice_mut(ndarray::s![r..r + vp.shape()[0], ..].as_ref())
                .assign(vp);
            r += vp.shape()[0];
        }
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(row_counts.len());
                let mut r = 0;
                for rc in &row_counts {
                    grads.push(
                        g.slice(ndarray::s![r..r + rc, ..].as_ref())
                            .to_owned()
                            .into_dyn(),
                    );
                    r += rc;
                }
                grads
            })),
            false,
            "concat_rows",
            None,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0])[0];
        let col_counts: Vec<usize> = parts.iter().map(|p| self.shape(*p)[1]).collect();
        let total: usize = col_counts.iter().sum();
        let mut out = ArrayD::zeros(IxDyn(&[rows, total]));
        let mut c = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.shape()[0], rows, "concat_cols row mismatch");
            out.slice_mut(ndarray::s![.., c..c + vp.shape()[1]].as_ref())
                .assign(vp);
            c += vp.shape()[1];
        }
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(col_counts.len());
                let mut c = 0;
                for cc in &col_counts {
                    grads.push(
                        g.slice(ndarray::s![.., c..c + cc].as_ref())
                            .to_owned()
                            .into_dyn(),
                    );
                    c += cc;
                }
                grads
            })),
            false,
            "concat_cols",
            None,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2);
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        assert!(idx.iter().all(|&i| i < rows), "gather_rows out of range");
        let mut out = ArrayD::zeros(IxDyn(&[idx.len(), cols]));
        for (k, &i) in idx.iter().enumerate() {
            out.slice_mut(ndarray::s![k..k + 1, ..].as_ref())
                .assign(&va.slice(ndarray::s![i..i + 1, ..].as_ref()));
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&[rows, cols]));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = da.slice_mut(ndarray::s![i..i + 1, ..].as_ref());
                    row += &g.slice(ndarray::s![k..k + 1, ..].as_ref());
                }
                vec![da]
            })),
            false,
            "gather_rows",
            None,
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).clone();
        let vb = self.value(b).clone();
        assert!(va.ndim() == 2 && vb.ndim() == 2, "matmul expects 2-d");
        assert_eq!(va.shape()[1], vb.shape()[0], "matmul inner dim mismatch");
        let a2 = va.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
        let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                let a2 = va.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
            false,
            "matmul",
            None,
        )
    }

    /// `x (r,c) + bias (c)` broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x).clone();
        let vb = self.value(bias).clone();
        assert!(vx.ndim() == 2 && vb.ndim() == 1 && vx.shape()[1] == vb.shape()[0]);
        let mut out = vx;
        for mut row in out.rows_mut() {
            row += &vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        self.push(
            out,
            vec![x, bias],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                vec![g.clone(), g2.sum_axis(ndarray::Axis(0)).into_dyn()]
            })),
            false,
            "add_bias_row",
            None,
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let shape: Vec<usize> = va.shape().to_vec();
        let out = scalar(va.sum());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![ArrayD::from_elem(IxDyn(&shape), g[[]])]
            })),
            false,
            "sum_all",
            None,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let shape: Vec<usize> = va.shape().to_vec();
        let out = scalar(va.sum() / n);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![ArrayD::from_elem(IxDyn(&shape), g[[]] / n)]
            })),
            false,
            "mean_all",
            None,
        )
    }

    // ---- normalization ----

    /// Row-wise softmax over the last axis of a 2-d array.
    pub fn softmax_rows(&mut self, a: Var, label: &str) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2, "softmax_rows expects 2-d");
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx2 = dx.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                for (mut drow, yrow) in dx2.rows_mut().into_iter().zip(y2.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                    for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                        *d = y * (*d - dot);
                    }
                }
                vec![dx]
            })),
            false,
            "softmax_rows",
            Some(label.to_string()),
        )
    }

    /// Layer normalization over the last axis of a 2-d array with learnable
    /// gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x).clone();
        let vgain = self.value(gain).clone();
        let vbias = self.value(bias).clone();
        assert!(vx.ndim() == 2 && vgain.ndim() == 1 && vbias.ndim() == 1);
        let c = vx.shape()[1];
        assert!(vgain.shape()[0] == c && vbias.shape()[0] == c);
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.shape()[0]);
        for mut row in xhat.rows_mut() {
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mu) * is);
        }
        let mut out = xhat.clone();
        let g1 = vgain.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let b1 = vbias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g1[j] + b1[j];
            }
        }
        let xhat_c = xhat.clone();
        self.push(
            out,
            vec![x, gain, bias],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let xh = xhat_c.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gn = vgain.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut dgain = ndarray::Array1::<f64>::zeros(c);
                let mut dbias = ndarray::Array1::<f64>::zeros(c);
                let mut dx = ndarray::Array2::<f64>::zeros((g2.shape()[0], c));
                for (r, (grow, xrow)) in g2.rows().into_iter().zip(xh.rows()).enumerate() {
                    for j in 0..c {
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                    // d = dL/dxhat; dx = inv_std * (d - mean(d) - xhat * mean(d*xhat))
                    let d: Vec<f64> = (0..c).map(|j| grow[j] * gn[j]).collect();
                    let mean_d: f64 = d.iter().sum::<f64>() / c as f64;
                    let mean_dx: f64 =
                        d.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[[r, j]] = inv_std[r] * (d[j] - mean_d - xrow[j] * mean_dx);
                    }
                }
                vec![dx.into_dyn(), dgain.into_dyn(), dbias.into_dyn()]
            })),
            false,
            "layer_norm",
            None,
        )
    }

    // ---- lookups ----

    /// Gather embedding rows: `table (V, D)` indexed by `ids`.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.ndim(), 2);
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        assert!(ids.iter().all(|&i| i < v), "embedding id out of range");
        let mut out = ArrayD::zeros(IxDyn(&[ids.len(), d]));
        for (k, &i) in ids.iter().enumerate() {
            out.slice_mut(ndarray::s![k..k + 1, ..].as_ref())
                .assign(&vt.slice(ndarray::s![i..i + 1, ..].as_ref()));
        }
        self.push(
            out,
            vec![table],
            Some(Box::new(move |g| {
                let mut dt = ArrayD::zeros(IxDyn(&[v, d]));
                for (k, &i) in ids.iter().enumerate() {
                    let mut row = dt.slice_mut(ndarray::s![i..i + 1, ..].as_ref());
                    row += &g.slice(ndarray::s![k..k + 1, ..].as_ref());
                }
                vec![dt]
            })),
            false,
            "embed",
            None,
        )
    }

    // ---- spatial ops on (H, W, C) ----

    /// Non-overlapping p×p patch rearrangement:
    /// `(H, W, C) -> (H/p, W/p, p·p·C)`, block-row-major within a patch.
    pub fn space_to_depth(&mut self, a: Var, p: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 3);
        let (h, w, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert!(h % p == 0 && w % p == 0, "space_to_depth divisibility");
        let (ho, wo) = (h / p, w / p);
        let mut out = ArrayD::zeros(IxDyn(&[ho, wo, p * p * c]));
        for i in 0..ho {
            for j in 0..wo {
                for di in 0..p {
                    for dj in 0..p {
                        for ch in 0..c {
                            out[[i, j, (di * p + dj) * c + ch]] = va[[i * p + di, j * p + dj, ch]];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&[h, w, c]));
                for i in 0..ho {
                    for j in 0..wo {
                        for di in 0..p {
                            for dj in 0..p {
                                for ch in 0..c {
                                    da[[i * p + di, j * p + dj, ch]] =
                                        g[[i, j, (di * p + dj) * c + ch]];
                                }
                            }
                        }
                    }
                }
                vec![da]
            })),
            false,
            "space_to_depth",
            None,
        )
    }

    /// Adaptive average pooling of `(H, W, C)` to `(s, s, C)` with the
    /// floor/ceil region rule, so `s` equal to the native size is identity.
    pub fn adaptive_avg_pool(&mut self, a: Var, s: usize) -> Var {
        let va = self.value(a).clone();
        assert_eq!(va.ndim(), 3);
        let (h, w, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert!(s >= 1, "pool size must be positive");
        let region = move |i: usize, n: usize| -> (usize, usize) {
            let start = (i * n) / s;
            let end = ((i + 1) * n).div_ceil(s);
            (start, end)
        };
        let mut out = ArrayD::zeros(IxDyn(&[s, s, c]));
        for oi in 0..s {
            for oj in 0..s {
                let (r0, r1) = region(oi, h);
                let (c0, c1) = region(oj, w);
                let area = ((r1 - r0) * (c1 - c0)) as f64;
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            acc += va[[i, j, ch]];
                        }
                    }
                    out[[oi, oj, ch]] = acc / area;
                }
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&[h, w, c]));
                for oi in 0..s {
                    for oj in 0..s {
                        let (r0, r1) = region(oi, h);
                        let (c0, c1) = region(oj, w);
                        let area = ((r1 - r0) * (c1 - c0)) as f64;
                        for ch in 0..c {
                            let share = g[[oi, oj, ch]] / area;
                            for i in r0..r1 {
                                for j in c0..c1 {
                                    da[[i, j, ch]] += share;
                                }
                            }
                        }
                    }
                }
                vec![da]
            })),
            false,
            "adaptive_avg_pool",
            None,
        )
    }

    /// Bilinear resize of `(H, W, C)` to `(h2, w2)`, half-pixel centers,
    /// clamped to the edge. Identity when the size is unchanged.
    pub fn bilinear_resize(&mut self, a: Var, h2: usize, w2: usize) -> Var {
        let va = self.value(a).clone();
        assert_eq!(va.ndim(), 3);
        let (h, w, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        if h == h2 && w == w2 {
            // fast path keeps exact identity contracts exact
            let out = va;
            return self.push(
                out,
                vec![a],
                Some(Box::new(|g| vec![g.clone()])),
                false,
                "bilinear_resize",
                None,
            );
        }
        let taps_h = resize_taps(h, h2);
        let taps_w = resize_taps(w, w2);
        let mut out = ArrayD::zeros(IxDyn(&[h2, w2, c]));
        for i in 0..h2 {
            let (y0, y1, fy) = taps_h[i];
            for j in 0..w2 {
                let (x0, x1, fx) = taps_w[j];
                for ch in 0..c {
                    out[[i, j, ch]] = (1.0 - fy) * (1.0 - fx) * va[[y0, x0, ch]]
                        + (1.0 - fy) * fx * va[[y0, x1, ch]]
                        + fy * (1.0 - fx) * va[[y1, x0, ch]]
                        + fy * fx * va[[y1, x1, ch]];
                }
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut da = ArrayD::zeros(IxDyn(&[h, w, c]));
                for i in 0..h2 {
                    let (y0, y1, fy) = taps_h[i];
                    for j in 0..w2 {
                        let (x0, x1, fx) = taps_w[j];
                        for ch in 0..c {
                            let gv = g[[i, j, ch]];
                            da[[y0, x0, ch]] += (1.0 - fy) * (1.0 - fx) * gv;
                            da[[y0, x1, ch]] += (1.0 - fy) * fx * gv;
                            da[[y1, x0, ch]] += fy * (1.0 - fx) * gv;
                            da[[y1, x1, ch]] += fy * fx * gv;
                        }
                    }
                }
                vec![da]
            })),
            false,
            "bilinear_resize",
            None,
        )
    }

    /// Add per-block constant deltas to a feature map: for each `k`,
    /// `deltas` row `k` is broadcast over `blocks[k] = (r0, r1, c0, c1)`.
    pub fn add_blocks(
        &mut self,
        level: Var,
        deltas: Var,
        blocks: Vec<(usize, usize, usize, usize)>,
    ) -> Var {
        let vl = self.value(level).clone();
        let vd = self.value(deltas).clone();
        assert_eq!(vl.ndim(), 3);
        assert_eq!(vd.ndim(), 2);
        let (h, w, c) = (vl.shape()[0], vl.shape()[1], vl.shape()[2]);
        assert_eq!(vd.shape(), &[blocks.len(), c]);
        for &(r0, r1, c0, c1) in &blocks {
            assert!(
                r0 < r1 && r1 <= h && c0 < c1 && c1 <= w,
                "block out of range"
            );
        }
        let mut out = vl;
        for (k, &(r0, r1, c0, c1)) in blocks.iter().enumerate() {
            for i in r0..r1 {
                for j in c0..c1 {
                    for ch in 0..c {
                        out[[i, j, ch]] += vd[[k, ch]];
                    }
                }
            }
        }
        let nblocks = blocks.len();
        self.push(
            out,
            vec![level, deltas],
            Some(Box::new(move |g| {
                let mut dd = ArrayD::zeros(IxDyn(&[nblocks, c]));
                for (k, &(r0, r1, c0, c1)) in blocks.iter().enumerate() {
                    for i in r0..r1 {
                        for j in c0..c1 {
                            for ch in 0..c {
                                dd[[k, ch]] += g[[i, j, ch]];
                            }
                        }
                    }
                }
                vec![g.clone(), dd]
            })),
            false,
            "add_blocks",
            None,
        )
    }

    /// Numerically stable binary cross-entropy with logits, elementwise.
    /// `target` is a constant array of the same shape with entries in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, target: ArrayD<f64>) -> Var {
        let vz = self.value(logits).clone();
        assert_eq!(vz.shape(), target.shape(), "bce shape mismatch");
        let mut out = vz.clone();
        ndarray::Zip::from(&mut out).and(&target).for_each(|o, &y| {
            let z = *o;
            *o = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        });
        self.push(
            out,
            vec![logits],
            Some(Box::new(move |g| {
                let mut dz = vz.mapv(sigmoid_f);
                dz -= &target;
                vec![&dz * g]
            })),
            false,
            "bce_with_logits",
            None,
        )
    }

    /// Multiscale deformable sampling. For each query `n`, head `h`,
    /// level `l` and point `p`, a value map is sampled bilinearly (zero
    /// padding outside) at the query's reference point displaced by a
    /// learned offset in that level's pixel units, and the samples are
    /// combined with the given weights:
    ///
    /// `out[n, h·Dh..] = Σ_{l,p} weights[n, (h·L+l)·P+p] · sample_l(ref_n + off)`
    ///
    /// `values`: one `(H_l, W_l, D)` map per level; head `h` reads channels
    /// `h·Dh..(h+1)·Dh`. `offsets`: `(N, H·L·P·2)`. `weights`: `(N, H·L·P)`,
    /// already normalized. `refs`: `(N, 2)` normalized (x, y) constants.
    #[allow(clippy::too_many_arguments)]
    pub fn msdeform_sample(
        &mut self,
        values: &[Var],
        offsets: Var,
        weights: Var,
        refs: ndarray::Array2<f64>,
        heads: usize,
        points: usize,
    ) -> Var {
        let levels = values.len();
        let vmaps: Vec<ArrayD<f64>> = values.iter().map(|v| self.value(*v).clone()).collect();
        let d = vmaps[0].shape()[2];
        assert!(vmaps.iter().all(|m| m.ndim() == 3 && m.shape()[2] == d));
        assert!(d % heads == 0, "head count must divide hidden dim");
        let dh = d / heads;
        let voff = self.value(offsets).clone();
        let vw = self.value(weights).clone();
        let n = refs.shape()[0];
        assert_eq!(voff.shape(), &[n, heads * levels * points * 2]);
        assert_eq!(vw.shape(), &[n, heads * levels * points]);
        let dims: Vec<(usize, usize)> =
            vmaps.iter().map(|m| (m.shape()[0], m.shape()[1])).collect();

        let mut out = ArrayD::zeros(IxDyn(&[n, d]));
        for q in 0..n {
            for h in 0..heads {
                for l in 0..levels {
                    for p in 0..points {
                        let (idx, u, v) =
                            sample_location(&refs, &voff, dims[l], levels, points, q, h, l, p);
                        let wgt = vw[[q, idx]];
                        let (hl, wl) = dims[l];
                        for (corner_w, y, x) in bilinear_corners(u, v, hl, wl) {
                            for ch in 0..dh {
                                out[[q, h * dh + ch]] +=
                                    wgt * corner_w * vmaps[l][[y, x, h * dh + ch]];
                            }
                        }
                    }
                }
            }
        }
        let refs_b = refs;

        let mut parents = values.to_vec();
        parents.push(offsets);
        parents.push(weights);
        self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut dvals: Vec<ArrayD<f64>> = dims
                    .iter()
                    .map(|&(hl, wl)| ArrayD::zeros(IxDyn(&[hl, wl, d])))
                    .collect();
                let mut doff = ArrayD::zeros(IxDyn(&[n, heads * levels * points * 2]));
                let mut dw = ArrayD::zeros(IxDyn(&[n, heads * levels * points]));
                for q in 0..n {
                    for h in 0..heads {
                        for l in 0..levels {
                            for p in 0..points {
                                let (idx, u, v) = sample_location(
                                    &refs_b, &voff, dims[l], levels, points, q, h, l, p,
                                );
                                let wgt = vw[[q, idx]];
                                let (hl, wl) = dims[l];
                                let corners = bilinear_corners(u, v, hl, wl);
                                // d out / d weight = sampled vector
                                for ch in 0..dh {
                                    let gv = g[[q, h * dh + ch]];
                                    let mut s = 0.0;
                                    for &(cw, y, x) in &corners {
                                        s += cw * vmaps[l][[y, x, h * dh + ch]];
                                        dvals[l][[y, x, h * dh + ch]] += wgt * cw * gv;
                                    }
                                    dw[[q, idx]] += gv * s;
                                }
                                // d sample / d (u, v): derivatives of the corner weights
                                let (du_taps, dv_taps) = bilinear_corner_derivs(u, v, hl, wl);
                                let mut du_acc = 0.0;
                                let mut dv_acc = 0.0;
                                for ch in 0..dh {
                                    let gv = g[[q, h * dh + ch]];
                                    for &(cw, y, x) in &du_taps {
                                        du_acc += gv * cw * vmaps[l][[y, x, h * dh + ch]];
                                    }
                                    for &(cw, y, x) in &dv_taps {
                                        dv_acc += gv * cw * vmaps[l][[y, x, h * dh + ch]];
                                    }
                                }
                                doff[[q, idx * 2]] += wgt * du_acc;
                                doff[[q, idx * 2 + 1]] += wgt * dv_acc;
                            }
                        }
                    }
                }
                let mut grads = dvals;
                grads.push(doff);
                grads.push(dw);
                grads
            })),
            false,
            "msdeform_sample",
            None,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_location(
    refs: &ndarray::Array2<f64>,
    offsets: &ArrayD<f64>,
    (hl, wl): (usize, usize),
    levels: usize,
    points: usize,
    q: usize,
    h: usize,
    l: usize,
    p: usize,
) -> (usize, f64, f64) {
    let idx = (h * levels + l) * points + p;
    let u = refs[[q, 0]] * wl as f64 - 0.5 + offsets[[q, idx * 2]];
    let v = refs[[q, 1]] * hl as f64 - 0.5 + offsets[[q, idx * 2 + 1]];
    (idx, u, v)
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Source taps for edge-clamped bilinear resizing with half-pixel centers:
/// for output index `i`, returns `(lo, hi, frac)`.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let u = (i as f64 + 0.5) * scale - 0.5;
            let lo = u.floor();
            let frac = u - lo;
            let lo_i = (lo.max(0.0) as usize).min(n_in - 1);
            let hi_i = ((lo + 1.0).max(0.0) as usize).min(n_in - 1);
            // collapse the fraction when both taps clamp to the same cell
            let frac = if lo < 0.0 || lo as usize + 1 > n_in - 1 {
                0.0
            } else {
                frac
            };
            (lo_i, hi_i, frac)
        })
        .collect()
}

/// In-bounds corners and weights for zero-padded bilinear sampling at
/// continuous pixel coordinates `(u, v)` (x right, y down).
fn bilinear_corners(u: f64, v: f64, h: usize, w: usize) -> Vec<(f64, usize, usize)> {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut taps = Vec::with_capacity(4);
    for (dy, dx, wgt) in [
        (0i64, 0i64, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ] {
        let y = y0 as i64 + dy;
        let x = x0 as i64 + dx;
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            taps.push((wgt, y as usize, x as usize));
        }
    }
    taps
}

/// Derivatives of the bilinear corner weights with respect to `u` and `v`,
/// restricted to in-bounds corners (out-of-bounds values are zero, so they
/// drop out of the chain).
#[allow(clippy::type_complexity)]
fn bilinear_corner_derivs(
    u: f64,
    v: f64,
    h: usize,
    w: usize,
) -> (Vec<(f64, usize, usize)>, Vec<(f64, usize, usize)>) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut du = Vec::with_capacity(4);
    let mut dv = Vec::with_capacity(4);
    let corners = [
        (0i64, 0i64, -(1.0 - fy), -(1.0 - fx)),
        (0, 1, 1.0 - fy, -fx),
        (1, 0, -fy, 1.0 - fx),
        (1, 1, fy, fx),
    ];
    for (dy, dx, wu, wv) in corners {
        let y = y0 as i64 + dy;
        let x = x0 as i64 + dx;
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            du.push((wu, y as usize, x as usize));
            dv.push((wv, y as usize, x as usize));
        }
    }
    (du, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences through an arbitrary graph builder:
    /// `build` maps leaf values to a scalar.
    fn fd_check<F>(inputs: &[ArrayD<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let eps = 1e-6;
        for (k, a) in inputs.iter().enumerate() {
            let ga = grads
                .get(vars[k])
                .unwrap_or_else(|| panic!("no grad for input {k}"));
            for (flat, _) in a.iter().enumerate() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[flat] += eps;
                minus[k].as_slice_mut().unwrap()[flat] -= eps;
                let eval = |ins: &[ArrayD<f64>]| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ins.iter().map(|a| g.leaf(a.clone())).collect();
                    let r = build(&mut g, &vs);
                    g.scalar_value(r)
                };
                let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let ana = ga.iter().nth(flat).copied().unwrap();
                let denom = ana.abs().max(num.abs()).max(1e-8);
                assert!(
                    (ana - num).abs() / denom < tol,
                    "input {k} coord {flat}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]).mapv(|x| x + 2.5); // keep divisors away from 0
        fd_check(
            &[a.clone(), b.clone()],
            |g, v| {
                let m = g.mul(v[0], v[1]);
                let d = g.div(v[0], v[1]);
                let s = g.sub(m, d);
                let t = g.add(s, v[0]);
                let sc = g.scale(t, 0.7);
                g.sum_all(sc)
            },
            1e-7,
        );
        fd_check(
            &[a],
            |g, v| {
                let s = g.sigmoid(v[0]);
                let e = g.gelu(s);
                g.mean_all(e)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_bias_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 4]);
        let bias = randn(&mut rng, &[4]);
        fd_check(
            &[a, b, bias],
            |g, v| {
                let mm = g.matmul(v[0], v[1]);
                let wb = g.add_bias_row(mm, v[2]);
                let sm = g.softmax_rows(wb, "test");
                let t = g.transpose(sm);
                let sq = g.mul(t, t);
                g.sum_all(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[6, 9]).mapv(|x| x * 30.0); // large logits still stable
        let mut g = Graph::new();
        let v = g.constant(a);
        let sm = g.softmax_rows(v, "test");
        for row in g.value(sm).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.softmax_nodes().len(), 1);
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[4, 6]);
        let gain = randn(&mut rng, &[6]).mapv(|v| v + 1.5);
        let bias = randn(&mut rng, &[6]);
        fd_check(
            &[x, gain, bias],
            |g, v| {
                let ln = g.layer_norm_rows(v[0], v[1], v[2], 1e-5);
                let sq = g.mul(ln, ln);
                g.sum_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn shape_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[4, 6]);
        let y = randn(&mut rng, &[2, 6]);
        fd_check(
            &[x, y],
            |g, v| {
                let s = g.slice_rows(v[0], 1, 3);
                let c = g.concat_rows(&[s, v[1]]);
                let cc = g.slice_cols(c, 2, 5);
                let gth = g.gather_rows(cc, vec![0, 3, 3, 1]);
                let r = g.reshape(gth, &[2, 6]);
                let m = g.mul(r, r);
                g.sum_all(m)
            },
            1e-7,
        );
    }

    #[test]
    fn embed_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = randn(&mut rng, &[7, 3]);
        fd_check(
            &[table],
            |g, v| {
                let e = g.embed(v[0], vec![0, 2, 2, 6]);
                let sq = g.mul(e, e);
                g.sum_all(sq)
            },
            1e-7,
        );
    }

    #[test]
    fn spatial_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[4, 4, 2]);
        fd_check(
            &[x.clone()],
            |g, v| {
                let s = g.space_to_depth(v[0], 2);
                let sq = g.mul(s, s);
                g.sum_all(sq)
            },
            1e-7,
        );
        fd_check(
            &[x.clone()],
            |g, v| {
                let p = g.adaptive_avg_pool(v[0], 3); // 4 -> 3 exercises overlapping regions
                let sq = g.mul(p, p);
                g.sum_all(sq)
            },
            1e-7,
        );
        fd_check(
            &[x.clone()],
            |g, v| {
                let up = g.bilinear_resize(v[0], 7, 5);
                let sq = g.mul(up, up);
                g.sum_all(sq)
            },
            1e-7,
        );
        fd_check(
            &[x],
            |g, v| {
                let dn = g.bilinear_resize(v[0], 2, 2);
                let sq = g.mul(dn, dn);
                g.sum_all(sq)
            },
            1e-7,
        );
    }

    #[test]
    fn adaptive_pool_examples() {
        // mean of a 2x2 single-channel map pooled to 1x1
        let mut g = Graph::new();
        let x = g
            .constant(ArrayD::from_shape_vec(IxDyn(&[2, 2, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.adaptive_avg_pool(x, 1);
        assert_eq!(g.value(p)[[0, 0, 0]], 2.5);
        // pooling to the native size is identity
        let y = g
            .constant(ArrayD::from_shape_vec(IxDyn(&[2, 2, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let q = g.adaptive_avg_pool(y, 2);
        assert_eq!(g.value(q), g.value(y));
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[3, 5, 2]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let same = g.bilinear_resize(v, 3, 5);
        assert_eq!(g.value(same), &x);
        let c = g.constant(ArrayD::from_elem(IxDyn(&[4, 4, 1]), 3.25));
        let up = g.bilinear_resize(c, 9, 7);
        for v in g.value(up).iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn add_blocks_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let level = randn(&mut rng, &[4, 4, 3]);
        let deltas = randn(&mut rng, &[2, 3]);
        fd_check(
            &[level, deltas],
            |g, v| {
                let out = g.add_blocks(v[0], v[1], vec![(0, 2, 0, 2), (2, 4, 1, 3)]);
                let sq = g.mul(out, out);
                g.sum_all(sq)
            },
            1e-7,
        );
    }

    #[test]
    fn bce_with_logits_grads_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = randn(&mut rng, &[3, 3]).mapv(|x| x * 4.0);
        let y = ArrayD::from_shape_fn(
            IxDyn(&[3, 3]),
            |_| {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            },
        );
        let target = y.clone();
        fd_check(
            &[z],
            move |g, v| {
                let l = g.bce_with_logits(v[0], target.clone());
                g.mean_all(l)
            },
            1e-6,
        );
        // stable even at extreme logits
        let mut g = Graph::new();
        let z = g.constant(ArrayD::from_elem(IxDyn(&[1, 1]), 1e4));
        let l = g.bce_with_logits(z, ArrayD::from_elem(IxDyn(&[1, 1]), 1.0));
        assert!(g.value(l)[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn msdeform_sample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let heads = 2;
        let points = 2;
        let d = 4;
        let v0 = randn(&mut rng, &[3, 3, d]);
        let v1 = randn(&mut rng, &[2, 2, d]);
        let n = 3;
        let offsets = randn(&mut rng, &[n, heads * 2 * points * 2]).mapv(|x| x * 0.7 + 0.13);
        let weights = randn(&mut rng, &[n, heads * 2 * points]).mapv(|x| x * 0.4 + 0.5);
        let refs = ndarray::Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.15..0.85));
        fd_check(
            &[v0, v1, offsets, weights],
            move |g, v| {
                let out = g.msdeform_sample(&[v[0], v[1]], v[2], v[3], refs.clone(), heads, points);
                let sq = g.mul(out, out);
                g.sum_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn msdeform_two_level_toy_matches_scalar_oracle() {
        // 2-level toy with 4 + 1 value cells, random offsets
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let heads = 1;
        let points = 2;
        let d = 2;
        let maps = [randn(&mut rng, &[2, 2, d]), randn(&mut rng, &[1, 1, d])];
        let n = 5;
        let taps = heads * 2 * points;
        let offsets = randn(&mut rng, &[n, taps * 2]).mapv(|x| x * 1.3);
        let weights = randn(&mut rng, &[n, taps]).mapv(|x| 0.25 + 0.1 * x);
        let refs = ndarray::Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.05..0.95));
        let mut g = Graph::new();
        let vs: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let off = g.constant(offsets.clone());
        let w = g.constant(weights.clone());
        let out = g.msdeform_sample(&vs, off, w, refs.clone(), heads, points);
        // scalar re-derivation, independent loop order
        for q in 0..n {
            for ch in 0..d {
                let mut expect = 0.0;
                for l in 0..2usize {
                    let (hl, wl) = (maps[l].shape()[0], maps[l].shape()[1]);
                    for p in 0..points {
                        let idx = l * points + p;
                        let u = refs[[q, 0]] * wl as f64 - 0.5 + offsets[[q, idx * 2]];
                        let v = refs[[q, 1]] * hl as f64 - 0.5 + offsets[[q, idx * 2 + 1]];
                        for (cw, y, x) in bilinear_corners(u, v, hl, wl) {
                            expect += weights[[q, idx]] * cw * maps[l][[y, x, ch]];
                        }
                    }
                }
                let got = g.value(out)[[q, ch]];
                assert!((got - expect).abs() < 1e-12, "q={q} ch={ch}");
            }
        }
    }

    #[test]
    fn msdeform_zero_offset_matches_direct_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 4;
        let heads = 2;
        let points = 2;
        let levels = 2;
        let maps = [randn(&mut rng, &[4, 4, d]), randn(&mut rng, &[2, 2, d])];
        let n = 5;
        let refs = ndarray::Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.1..0.9));
        let mut g = Graph::new();
        let vs: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let off = g.constant(ArrayD::zeros(IxDyn(&[n, heads * levels * points * 2])));
        let w = g.constant(ArrayD::from_elem(
            IxDyn(&[n, heads * levels * points]),
            1.0 / (levels * points) as f64,
        ));
        let out = g.msdeform_sample(&vs, off, w, refs.clone(), heads, points);
        // direct computation: average of bilinear samples at the references
        for q in 0..n {
            for h in 0..heads {
                for ch in 0..d / heads {
                    let mut expect = 0.0;
                    for m in maps.iter() {
                        let (hl, wl) = (m.shape()[0], m.shape()[1]);
                        let u = refs[[q, 0]] * wl as f64 - 0.5;
                        let v = refs[[q, 1]] * hl as f64 - 0.5;
                        for (cw, y, x) in bilinear_corners(u, v, hl, wl) {
                            expect += cw * m[[y, x, h * (d / heads) + ch]]
                                / (levels * points) as f64
                                * points as f64;
                        }
                    }
                    let got = g.value(out)[[q, h * (d / heads) + ch]];
                    assert!(
                        (got - expect).abs() < 1e-10,
                        "q={q} h={h} ch={ch}: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        // f = (x + x) . x  => df/dx = 4x... checked against finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[2, 2]);
        fd_check(
            &[x],
            |g, v| {
                let two_x = g.add(v[0], v[0]);
                let prod = g.mul(two_x, v[0]);
                g.sum_all(prod)
            },
            1e-7,
        );
    }
}
