//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Forward calls record one node per op; `backward` walks the tape once in
//! reverse. Node values are immutable after creation. Gradients accumulate
//! in node order, so a fixed call sequence gives bit-identical results.

use std::cell::RefCell;
use std::rc::Rc;

use super::scalar::Scalar;
use super::tensor::{dot, gemm_nn, transpose, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    Softplus { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Neg { a: usize },
    Sin { a: usize },
    Cos { a: usize },
    ClampMax { a: usize, max: T },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    SumAll { a: usize },
    CumsumExclusive { a: usize },
    WeightedSumK { w: usize, c: usize, k: usize },
    BilinearSample { grid: usize, coords: Rc<Vec<[f64; 2]>> },
    Conv2dStride2 { input: usize, kernel: usize, bias: usize },
    UpsampleBilinear { input: usize },
    AvgPoolGlobal { input: usize },
    Reshape { a: usize },
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the backward root with respect to `v`. Zero tensors are
    /// represented as `None` for vars the root never touched.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.id].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { id: nodes.len() - 1 }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, precomputed geometry).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let out = gemm_nn(&va, &vb);
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(out, Op::Matmul { a: a.id, b: b.id }, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(out, Op::Add { a: a.id, b: b.id }, ng)
    }

    /// Adds a length-n bias row to every row of an [m, n] matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(bias);
        let (m, n) = va.dims2();
        assert_eq!(vb.len(), n, "bias length {} for width {}", vb.len(), n);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] = va.data()[i * n + j] + vb.data()[j];
            }
        }
        let ng = self.needs(a.id) || self.needs(bias.id);
        self.push(out, Op::AddRow { a: a.id, bias: bias.id }, ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(out, Op::Sub { a: a.id, b: b.id }, ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        let ng = self.needs(a.id) || self.needs(b.id);
        self.push(out, Op::Mul { a: a.id, b: b.id }, ng)
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a.id);
        self.push(out, Op::Scale { a: a.id, s }, ng)
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.value(a).map(softplus_stable);
        let ng = self.needs(a.id);
        self.push(out, Op::Softplus { a: a.id }, ng)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_stable);
        let ng = self.needs(a.id);
        self.push(out, Op::Sigmoid { a: a.id }, ng)
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.needs(a.id);
        self.push(out, Op::Exp { a: a.id }, ng)
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let ng = self.needs(a.id);
        self.push(out, Op::Neg { a: a.id }, ng)
    }

    pub fn sin(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sin());
        let ng = self.needs(a.id);
        self.push(out, Op::Sin { a: a.id }, ng)
    }

    pub fn cos(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.cos());
        let ng = self.needs(a.id);
        self.push(out, Op::Cos { a: a.id }, ng)
    }

    pub fn clamp_max(&self, a: Var, max: T) -> Var {
        let out = self.value(a).map(|x| if x > max { max } else { x });
        let ng = self.needs(a.id);
        self.push(out, Op::ClampMax { a: a.id, max }, ng)
    }

    /// Column-wise concatenation of matrices sharing a row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let m = vals[0].dims2().0;
        let total: usize = vals.iter().map(|v| v.dims2().1).sum();
        let mut out = Tensor::zeros(&[m, total]);
        let mut col = 0;
        for v in &vals {
            let (vm, vn) = v.dims2();
            assert_eq!(vm, m, "concat_cols row mismatch");
            for i in 0..m {
                out.data_mut()[i * total + col..i * total + col + vn]
                    .copy_from_slice(&v.data()[i * vn..(i + 1) * vn]);
            }
            col += vn;
        }
        let ng = parts.iter().any(|&p| self.needs(p.id));
        self.push(out, Op::ConcatCols { parts: parts.iter().map(|p| p.id).collect() }, ng)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (m, n) = va.dims2();
        assert!(start + len <= n, "slice {}+{} out of width {}", start, len, n);
        let mut out = Tensor::zeros(&[m, len]);
        for i in 0..m {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&va.data()[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(a.id);
        self.push(out, Op::SliceCols { a: a.id, start, len }, ng)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        // fixed-order lane sum, same trick as dot
        let ones = vec![T::one(); va.len()];
        let s = dot(va.data(), &ones);
        let ng = self.needs(a.id);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.id }, ng)
    }

    /// y[i, j] = sum of x[i, 0..j] along each row.
    pub fn cumsum_exclusive(&self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = va.dims2();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let mut acc = T::zero();
            for j in 0..n {
                out.data_mut()[i * n + j] = acc;
                acc = acc + va.data()[i * n + j];
            }
        }
        let ng = self.needs(a.id);
        self.push(out, Op::CumsumExclusive { a: a.id }, ng)
    }

    /// out[r, :] = sum_k w[r, k] * c[r*k_per + k, :]
    /// Collapses per-sample rows into per-ray rows under scalar weights.
    pub fn weighted_sum_k(&self, w: Var, c: Var, k_per: usize) -> Var {
        let vw = self.value(w);
        let vc = self.value(c);
        let (rows, k) = vw.dims2();
        assert_eq!(k, k_per);
        let (cr, cc) = vc.dims2();
        assert_eq!(cr, rows * k_per, "sample rows {} for {} rays x {}", cr, rows, k_per);
        let mut out = Tensor::zeros(&[rows, cc]);
        for r in 0..rows {
            let orow = &mut out.data_mut()[r * cc..(r + 1) * cc];
            for kk in 0..k_per {
                let wv = vw.data()[r * k_per + kk];
                let crow = &vc.data()[(r * k_per + kk) * cc..(r * k_per + kk + 1) * cc];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o = *o + wv * cv;
                }
            }
        }
        let ng = self.needs(w.id) || self.needs(c.id);
        self.push(out, Op::WeightedSumK { w: w.id, c: c.id, k: k_per }, ng)
    }

    /// Samples an [H, W, C] grid at continuous (u, v) pixel coordinates,
    /// u along columns, v along rows, integer coordinates at cell centers.
    /// Coordinates outside the grid read zero. Coordinates are fixed data;
    /// gradients flow only into the grid.
    pub fn bilinear_sample(&self, grid: Var, coords: Rc<Vec<[f64; 2]>>) -> Var {
        let vg = self.value(grid);
        let (h, w, c) = vg.dims3();
        let mut out = Tensor::zeros(&[coords.len(), c]);
        for (i, &[u, v]) in coords.iter().enumerate() {
            let orow = &mut out.data_mut()[i * c..(i + 1) * c];
            for (x, y, wt) in bilinear_corners(u, v, h, w) {
                let wt = T::from_real(wt);
                let g = &vg.data()[(y * w + x) * c..(y * w + x + 1) * c];
                for (o, &gv) in orow.iter_mut().zip(g) {
                    *o = *o + wt * gv;
                }
            }
        }
        let ng = self.needs(grid.id);
        self.push(out, Op::BilinearSample { grid: grid.id, coords }, ng)
    }

    /// 4x4 kernel, stride 2, padding 1: halves each spatial dimension and
    /// keeps the receptive-field geometry mirror-symmetric.
    /// input [H, W, Cin], kernel [4, 4, Cin, Cout], bias [Cout].
    pub fn conv2d_stride2(&self, input: Var, kernel: Var, bias: Var) -> Var {
        let vi = self.value(input);
        let vk = self.value(kernel);
        let vb = self.value(bias);
        let (h, w, cin) = vi.dims3();
        assert_eq!(vk.shape(), &[4, 4, cin, vb.len()], "kernel shape");
        let cout = vb.len();
        assert!(h % 2 == 0 && w % 2 == 0, "conv input dims must be even");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out.data_mut()[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                orow.copy_from_slice(vb.data());
                for ky in 0..4 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..4 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ipix = &vi.data()
                            [((iy as usize) * w + ix as usize) * cin..((iy as usize) * w + ix as usize + 1) * cin];
                        for (ci, &ival) in ipix.iter().enumerate() {
                            let krow = &vk.data()[((ky * 4 + kx) * cin + ci) * cout..((ky * 4 + kx) * cin + ci + 1) * cout];
                            for (o, &kv) in orow.iter_mut().zip(krow) {
                                *o = *o + ival * kv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.needs(input.id) || self.needs(kernel.id) || self.needs(bias.id);
        self.push(out, Op::Conv2dStride2 { input: input.id, kernel: kernel.id, bias: bias.id }, ng)
    }

    /// Single-step bilinear resize with half-pixel centers and edge clamp.
    /// The mapping is symmetric under horizontal or vertical flips.
    pub fn upsample_bilinear(&self, input: Var, h_out: usize, w_out: usize) -> Var {
        let vi = self.value(input);
        let (h, w, c) = vi.dims3();
        let mut out = Tensor::zeros(&[h_out, w_out, c]);
        for oy in 0..h_out {
            let (y0, y1, fy) = resize_source(oy, h_out, h);
            for ox in 0..w_out {
                let (x0, x1, fx) = resize_source(ox, w_out, w);
                let orow = &mut out.data_mut()[(oy * w_out + ox) * c..(oy * w_out + ox + 1) * c];
                for (corner_y, corner_x, wt) in [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ] {
                    let wt = T::from_real(wt);
                    let g = &vi.data()[(corner_y * w + corner_x) * c..(corner_y * w + corner_x + 1) * c];
                    for (o, &gv) in orow.iter_mut().zip(g) {
                        *o = *o + wt * gv;
                    }
                }
            }
        }
        let ng = self.needs(input.id);
        self.push(out, Op::UpsampleBilinear { input: input.id }, ng)
    }

    /// [H, W, C] -> [1, C] spatial mean.
    pub fn avg_pool_global(&self, input: Var) -> Var {
        let vi = self.value(input);
        let (h, w, c) = vi.dims3();
        let mut out = Tensor::zeros(&[1, c]);
        for p in 0..h * w {
            let row = &vi.data()[p * c..(p + 1) * c];
            for (o, &v) in out.data_mut().iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::from_real(1.0 / (h * w) as f64);
        for o in out.data_mut() {
            *o = *o * inv;
        }
        let ng = self.needs(input.id);
        self.push(out, Op::AvgPoolGlobal { input: input.id }, ng)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshaped(shape);
        let ng = self.needs(a.id);
        self.push(out, Op::Reshape { a: a.id }, ng)
    }

    /// Walks the tape backwards from a scalar root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be scalar");
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        slots[root.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            self.propagate(&nodes, id, &g, &mut slots);
            slots[id] = Some(g);
        }
        Grads { slots }
    }

    fn propagate(&self, nodes: &[Node<T>], id: usize, g: &Tensor<T>, slots: &mut [Option<Tensor<T>>]) {
        let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut Tensor<T>)| {
            if !nodes[i].needs_grad {
                return;
            }
            let slot = &mut slots[i];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(val(i).shape()));
            }
            f(slot.as_mut().unwrap());
        };
        match &nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul { a, b } => {
                // explicit transposes keep both products on the fast kernel
                acc(*a, &mut |ga| ga.add_in_place(&gemm_nn(g, &transpose(val(*b)))));
                acc(*b, &mut |gb| gb.add_in_place(&gemm_nn(&transpose(val(*a)), g)));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| ga.add_in_place(g));
                acc(*b, &mut |gb| gb.add_in_place(g));
            }
            Op::AddRow { a, bias } => {
                acc(*a, &mut |ga| ga.add_in_place(g));
                acc(*bias, &mut |gb| {
                    let (m, n) = g.dims2();
                    for i in 0..m {
                        for (bj, &gv) in gb.data_mut().iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *bj = *bj + gv;
                        }
                    }
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| ga.add_in_place(g));
                acc(*b, &mut |gb| {
                    for (x, &gv) in gb.data_mut().iter_mut().zip(g.data()) {
                        *x = *x - gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                acc(*a, &mut |ga| ga.add_in_place(&g.zip_map(val(*b), |gv, bv| gv * bv)));
                acc(*b, &mut |gb| gb.add_in_place(&g.zip_map(val(*a), |gv, av| gv * av)));
            }
            Op::Scale { a, s } => {
                let s = *s;
                acc(*a, &mut |ga| ga.add_in_place(&g.map(|gv| gv * s)));
            }
            Op::Softplus { a } => {
                acc(*a, &mut |ga| ga.add_in_place(&g.zip_map(val(*a), |gv, x| gv * sigmoid_stable(x))));
            }
            Op::Sigmoid { a } => {
                let y = &nodes[id].value;
                acc(*a, &mut |ga| {
                    ga.add_in_place(&g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)))
                });
            }
            Op::Exp { a } => {
                let y = &nodes[id].value;
                acc(*a, &mut |ga| ga.add_in_place(&g.zip_map(y, |gv, yv| gv * yv)));
            }
            Op::Neg { a } => {
                acc(*a, &mut |ga| ga.add_in_place(&g.map(|gv| -gv)));
            }
            Op::Sin { a } => {
                acc(*a, &mut |ga| ga.add_in_place(&g.zip_map(val(*a), |gv, x| gv * x.cos())));
            }
            Op::Cos { a } => {
                acc(*a, &mut |ga| ga.add_in_place(&g.zip_map(val(*a), |gv, x| -(gv * x.sin()))));
            }
            Op::ClampMax { a, max } => {
                let max = *max;
                acc(*a, &mut |ga| {
                    ga.add_in_place(&g.zip_map(val(*a), |gv, x| if x > max { T::zero() } else { gv }))
                });
            }
            Op::ConcatCols { parts } => {
                let (m, total) = nodes[id].value.dims2();
                let mut col = 0;
                for &p in parts {
                    let (_, pn) = val(p).dims2();
                    acc(p, &mut |gp| {
                        for i in 0..m {
                            for j in 0..pn {
                                let gi = i * pn + j;
                                gp.data_mut()[gi] = gp.data()[gi] + g.data()[i * total + col + j];
                            }
                        }
                    });
                    col += pn;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = val(*a).dims2();
                let (start, len) = (*start, *len);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..len {
                            let gi = i * n + start + j;
                            ga.data_mut()[gi] = ga.data()[gi] + g.data()[i * len + j];
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g.item();
                acc(*a, &mut |ga| {
                    for x in ga.data_mut() {
                        *x = *x + gv;
                    }
                });
            }
            Op::CumsumExclusive { a } => {
                let (m, n) = val(*a).dims2();
                acc(*a, &mut |ga| {
                    // dx[j] = sum of dy over columns right of j
                    for i in 0..m {
                        let mut suffix = T::zero();
                        for j in (0..n).rev() {
                            suffix = suffix + g.data()[i * n + j];
                            let gi = i * n + j;
                            // y[j] excludes x[j]; x[j] feeds y[j+1..]
                            ga.data_mut()[gi] = ga.data()[gi] + suffix - g.data()[gi];
                        }
                    }
                });
            }
            Op::WeightedSumK { w, c, k } => {
                let vw = val(*w);
                let vc = val(*c);
                let (rows, _) = vw.dims2();
                let (_, cc) = vc.dims2();
                let k = *k;
                acc(*w, &mut |gw| {
                    for r in 0..rows {
                        let grow = &g.data()[r * cc..(r + 1) * cc];
                        for kk in 0..k {
                            let crow = &vc.data()[(r * k + kk) * cc..(r * k + kk + 1) * cc];
                            let gi = r * k + kk;
                            gw.data_mut()[gi] = gw.data()[gi] + dot(grow, crow);
                        }
                    }
                });
                acc(*c, &mut |gc| {
                    for r in 0..rows {
                        let grow = &g.data()[r * cc..(r + 1) * cc];
                        for kk in 0..k {
                            let wv = vw.data()[r * k + kk];
                            let crow = &mut gc.data_mut()[(r * k + kk) * cc..(r * k + kk + 1) * cc];
                            for (cv, &gv) in crow.iter_mut().zip(grow) {
                                *cv = *cv + wv * gv;
                            }
                        }
                    }
                });
            }
            Op::BilinearSample { grid, coords } => {
                let (h, w, c) = val(*grid).dims3();
                acc(*grid, &mut |gg| {
                    for (i, &[u, v]) in coords.iter().enumerate() {
                        let grow = &g.data()[i * c..(i + 1) * c];
                        for (x, y, wt) in bilinear_corners(u, v, h, w) {
                            let wt = T::from_real(wt);
                            let cell = &mut gg.data_mut()[(y * w + x) * c..(y * w + x + 1) * c];
                            for (o, &gv) in cell.iter_mut().zip(grow) {
                                *o = *o + wt * gv;
                            }
                        }
                    }
                });
            }
            Op::Conv2dStride2 { input, kernel, bias } => {
                let vi = val(*input);
                let vk = val(*kernel);
                let (h, w, cin) = vi.dims3();
                let cout = val(*bias).len();
                let (ho, wo) = (h / 2, w / 2);
                acc(*bias, &mut |gb| {
                    for p in 0..ho * wo {
                        let grow = &g.data()[p * cout..(p + 1) * cout];
                        for (o, &gv) in gb.data_mut().iter_mut().zip(grow) {
                            *o = *o + gv;
                        }
                    }
                });
                acc(*kernel, &mut |gk| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let grow = &g.data()[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                            for ky in 0..4 {
                                let iy = (2 * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..4 {
                                    let ix = (2 * ox + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let pix = ((iy as usize) * w + ix as usize) * cin;
                                    for ci in 0..cin {
                                        let ival = vi.data()[pix + ci];
                                        let krow = &mut gk.data_mut()
                                            [((ky * 4 + kx) * cin + ci) * cout..((ky * 4 + kx) * cin + ci + 1) * cout];
                                        for (o, &gv) in krow.iter_mut().zip(grow) {
                                            *o = *o + ival * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*input, &mut |gi| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let grow = &g.data()[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                            for ky in 0..4 {
                                let iy = (2 * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..4 {
                                    let ix = (2 * ox + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let pix = ((iy as usize) * w + ix as usize) * cin;
                                    for ci in 0..cin {
                                        let krow = &vk.data()
                                            [((ky * 4 + kx) * cin + ci) * cout..((ky * 4 + kx) * cin + ci + 1) * cout];
                                        let gi_d = gi.data_mut();
                                        gi_d[pix + ci] = gi_d[pix + ci] + dot(krow, grow);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::UpsampleBilinear { input } => {
                let (h, w, c) = val(*input).dims3();
                let sh = nodes[id].value.shape().to_vec();
                let (h_out, w_out) = (sh[0], sh[1]);
                acc(*input, &mut |gi| {
                    for oy in 0..h_out {
                        let (y0, y1, fy) = resize_source(oy, h_out, h);
                        for ox in 0..w_out {
                            let (x0, x1, fx) = resize_source(ox, w_out, w);
                            let grow = &g.data()[(oy * w_out + ox) * c..(oy * w_out + ox + 1) * c];
                            for (cy, cx, wt) in [
                                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                (y0, x1, (1.0 - fy) * fx),
                                (y1, x0, fy * (1.0 - fx)),
                                (y1, x1, fy * fx),
                            ] {
                                let wt = T::from_real(wt);
                                let cell = &mut gi.data_mut()[(cy * w + cx) * c..(cy * w + cx + 1) * c];
                                for (o, &gv) in cell.iter_mut().zip(grow) {
                                    *o = *o + wt * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPoolGlobal { input } => {
                let (h, w, c) = val(*input).dims3();
                let inv = T::from_real(1.0 / (h * w) as f64);
                acc(*input, &mut |gi| {
                    for p in 0..h * w {
                        let cell = &mut gi.data_mut()[p * c..(p + 1) * c];
                        for (o, &gv) in cell.iter_mut().zip(g.data()) {
                            *o = *o + inv * gv;
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                acc(*a, &mut |ga| {
                    for (x, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x = *x + gv;
                    }
                });
            }
        }
    }
}

pub fn softplus_stable<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on both tails
    let zero = T::zero();
    let m = if x > zero { x } else { zero };
    m + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_stable<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// In-bounds corner cells and weights for a bilinear read at (u, v).
/// Out-of-range corners are dropped, which implements the zero border.
fn bilinear_corners(u: f64, v: f64, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let cands = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    cands.into_iter().filter_map(move |(x, y, wt)| {
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h && wt != 0.0 {
            Some((x as usize, y as usize, wt))
        } else {
            None
        }
    })
}

/// Source cells for bilinear resize with half-pixel centers and edge clamp.
fn resize_source(dst: usize, n_dst: usize, n_src: usize) -> (usize, usize, f64) {
    let scale = n_src as f64 / n_dst as f64;
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let clamped = src.max(0.0).min((n_src - 1) as f64);
    let i0 = clamped.floor();
    let f = clamped - i0;
    let i0u = i0 as usize;
    let i1u = (i0u + 1).min(n_src - 1);
    (i0u, i1u, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central finite differences over every leaf entry, compared against
    /// one reverse pass. `build` must construct the same graph each call.
    fn check_grads(
        leaf_shapes: &[&[usize]],
        build: impl Fn(&Tape<f64>, &[Var]) -> Var,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<Tensor<f64>> = leaf_shapes.iter().map(|s| rng_tensor(s, &mut rng)).collect();

        let eval = |leaves: &[Tensor<f64>]| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&tape, &vars);
            tape.value(out).item()
        };

        let tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars);
        let grads = tape.backward(out);

        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get(vars[li]).expect("leaf must receive a gradient");
            for ei in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[ei] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[ei] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[ei];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((an - fd) / denom).abs() < 1e-6,
                    "leaf {} entry {}: analytic {} vs fd {}",
                    li,
                    ei,
                    an,
                    fd
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        check_grads(&[&[3, 4], &[4, 5], &[5]], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let b = t.add_row(m, v[2]);
            let s = t.softplus(b);
            t.sum_all(s)
        }, 10);
    }

    #[test]
    fn grad_elementwise_ops() {
        check_grads(&[&[4, 3], &[4, 3]], |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.exp(t.scale(v[1], 0.3));
            let c = t.mul(a, b);
            let d = t.sub(c, v[1]);
            let e = t.add(d, v[0]);
            t.sum_all(t.mul(e, e))
        }, 11);
    }

    #[test]
    fn grad_trig_and_clamp() {
        check_grads(&[&[2, 6]], |t, v| {
            let s = t.sin(t.scale(v[0], 2.0));
            let c = t.cos(v[0]);
            let m = t.clamp_max(t.mul(s, c), 0.2);
            t.sum_all(m)
        }, 12);
    }

    #[test]
    fn grad_concat_slice() {
        check_grads(&[&[3, 2], &[3, 4]], |t, v| {
            let cat = t.concat_cols(&[v[0], v[1]]);
            let sl = t.slice_cols(cat, 1, 4);
            t.sum_all(t.mul(sl, sl))
        }, 13);
    }

    #[test]
    fn grad_cumsum_weighted_sum() {
        check_grads(&[&[3, 4], &[12, 2]], |t, v| {
            let cs = t.cumsum_exclusive(v[0]);
            let tr = t.exp(t.neg(cs));
            let out = t.weighted_sum_k(tr, v[1], 4);
            t.sum_all(t.mul(out, out))
        }, 14);
    }

    #[test]
    fn grad_bilinear_sample() {
        let coords = Rc::new(vec![
            [0.5, 0.5],
            [1.25, 2.75],
            [-0.25, 1.0],  // straddles the left border
            [3.5, 3.5],    // straddles the bottom-right corner
            [-5.0, -5.0],  // fully outside: zero everywhere
            [2.0, 1.0],    // exactly on a cell center
        ]);
        check_grads(&[&[4, 4, 3]], move |t, v| {
            let s = t.bilinear_sample(v[0], coords.clone());
            t.sum_all(t.mul(s, s))
        }, 15);
    }

    #[test]
    fn grad_conv_and_pool() {
        check_grads(&[&[6, 6, 2], &[4, 4, 2, 3], &[3]], |t, v| {
            let c = t.conv2d_stride2(v[0], v[1], v[2]);
            let a = t.softplus(c);
            let p = t.avg_pool_global(a);
            t.sum_all(t.mul(p, p))
        }, 16);
    }

    #[test]
    fn grad_upsample() {
        check_grads(&[&[3, 3, 2]], |t, v| {
            let u = t.upsample_bilinear(v[0], 6, 6);
            t.sum_all(t.mul(u, u))
        }, 17);
    }

    #[test]
    fn grad_reshape_and_reuse() {
        // same var consumed twice must accumulate both contributions
        check_grads(&[&[2, 6]], |t, v| {
            let r = t.reshape(v[0], &[3, 4]);
            let a = t.sum_all(t.mul(r, r));
            let b = t.sum_all(t.sigmoid(v[0]));
            t.add(a, b)
        }, 18);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape: Tape<f64> = Tape::new();
        let c = tape.constant(Tensor::from_real_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let l = tape.leaf(Tensor::from_real_slice(&[2, 2], &[0.5, 0.5, 0.5, 0.5]));
        let out = tape.sum_all(tape.mul(c, l));
        let grads = tape.backward(out);
        assert!(grads.get(c).is_none());
        assert!(grads.get(l).is_some());
    }

    #[test]
    fn bilinear_sample_integer_coords_read_cells_exactly() {
        let tape: Tape<f64> = Tape::new();
        let mut grid = Tensor::zeros(&[3, 4, 2]);
        for i in 0..grid.len() {
            grid.data_mut()[i] = i as f64;
        }
        let g = tape.constant(grid.clone());
        let s = tape.bilinear_sample(g, Rc::new(vec![[2.0, 1.0]]));
        let v = tape.value(s);
        // row 1, col 2
        assert_eq!(v.data()[0], grid.data()[(4 + 2) * 2]);
        assert_eq!(v.data()[1], grid.data()[(4 + 2) * 2 + 1]);
    }

    #[test]
    fn cumsum_exclusive_values() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::from_real_slice(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.cumsum_exclusive(a);
        assert_eq!(tape.value(c).data(), &[0.0, 1.0, 3.0, 6.0]);
    }
}
