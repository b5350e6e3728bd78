use super::{bidx, cross, m3, ridx, Axis, Node, Op, OpKind, Real, Shape, Tape, TraceError, Var};

impl<T: Real> Tape<T> {
    /// Reverse sweep from a scalar loss with seed 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), TraceError> {
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(TraceError::new(OpKind::Sum, &[shape]).with_detail("loss must be scalar"));
        }
        self.backward_seeded(&[(loss, &[T::one()])])
    }

    /// Reverse sweep with explicit output adjoints. Seeds for the same node
    /// accumulate. Previous adjoints are discarded.
    pub fn backward_seeded(&mut self, seeds: &[(Var, &[T])]) -> Result<(), TraceError> {
        self.adjoints.clear();
        self.adjoints.resize(self.values.len(), T::zero());
        self.reached.clear();
        self.reached.resize(self.nodes.len(), false);
        let mut last = 0;
        for &(v, seed) in seeds {
            let n = self.nodes[v.index()];
            if seed.len() != n.shape.numel() {
                return Err(
                    TraceError::new(n.op.kind(), &[n.shape]).with_detail(format!("seed of length {}", seed.len()))
                );
            }
            for (a, &s) in self.adjoints[n.offset..].iter_mut().zip(seed) {
                *a = *a + s;
            }
            self.reached[v.index()] = true;
            last = last.max(v.index());
        }
        for i in (0..=last).rev() {
            if !self.reached[i] || !self.nodes[i].grad {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize) {
        let node = self.nodes[i];
        let Tape {
            nodes,
            values,
            adjoints,
            reached,
            extra,
        } = self;
        let (lo, hi) = adjoints.split_at_mut(node.offset);
        let g = &hi[..node.shape.numel()];
        let out = &values[node.offset..node.offset + node.shape.numel()];
        let ctx = Ctx { nodes, values };
        let mut mark = |v: Var| {
            let take = nodes[v.index()].grad;
            if take {
                reached[v.index()] = true;
            }
            take
        };

        match node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if mark(a) {
                    ctx.acc_broadcast(lo, a, node.shape, g, |_, gv| gv);
                }
                if mark(b) {
                    ctx.acc_broadcast(lo, b, node.shape, g, |_, gv| sign * gv);
                }
            }
            Op::Mul(a, b) => {
                if mark(a) {
                    ctx.acc_broadcast(lo, a, node.shape, g, |k, gv| gv * ctx.at(b, node.shape, k));
                }
                if mark(b) {
                    ctx.acc_broadcast(lo, b, node.shape, g, |k, gv| gv * ctx.at(a, node.shape, k));
                }
            }
            Op::Div(a, b) => {
                if mark(a) {
                    ctx.acc_broadcast(lo, a, node.shape, g, |k, gv| gv / ctx.at(b, node.shape, k));
                }
                if mark(b) {
                    ctx.acc_broadcast(lo, b, node.shape, g, |k, gv| -gv * out[k] / ctx.at(b, node.shape, k));
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                // First operand wins ties, matching the forward pass.
                let picks_b = |k: usize| {
                    let (x, y) = (ctx.at(a, node.shape, k), ctx.at(b, node.shape, k));
                    if is_min {
                        y < x
                    } else {
                        y > x
                    }
                };
                if mark(a) {
                    ctx.acc_broadcast(lo, a, node.shape, g, |k, gv| if picks_b(k) { T::zero() } else { gv });
                }
                if mark(b) {
                    ctx.acc_broadcast(lo, b, node.shape, g, |k, gv| if picks_b(k) { gv } else { T::zero() });
                }
            }
            Op::Atan2(y, x) => {
                let denom = |k: usize| {
                    let (yv, xv) = (ctx.at(y, node.shape, k), ctx.at(x, node.shape, k));
                    (yv, xv, xv * xv + yv * yv)
                };
                if mark(y) {
                    ctx.acc_broadcast(lo, y, node.shape, g, |k, gv| {
                        let (_, xv, d) = denom(k);
                        if d == T::zero() {
                            T::zero()
                        } else {
                            gv * xv / d
                        }
                    });
                }
                if mark(x) {
                    ctx.acc_broadcast(lo, x, node.shape, g, |k, gv| {
                        let (yv, _, d) = denom(k);
                        if d == T::zero() {
                            T::zero()
                        } else {
                            -gv * yv / d
                        }
                    });
                }
            }
            Op::Where(m, a, b) => {
                let sel = |k: usize| ctx.at(m, node.shape, k) != T::zero();
                if mark(a) {
                    ctx.acc_broadcast(lo, a, node.shape, g, |k, gv| if sel(k) { gv } else { T::zero() });
                }
                if mark(b) {
                    ctx.acc_broadcast(lo, b, node.shape, g, |k, gv| if sel(k) { T::zero() } else { gv });
                }
            }
            Op::Neg(x) => {
                if mark(x) {
                    ctx.acc_unary(lo, x, g, |_, gv| -gv);
                }
            }
            Op::Relu(x) => {
                if mark(x) {
                    ctx.acc_unary(lo, x, g, |xv, gv| if xv > T::zero() { gv } else { T::zero() });
                }
            }
            Op::Sin(x) => {
                if mark(x) {
                    ctx.acc_unary(lo, x, g, |xv, gv| gv * xv.cos());
                }
            }
            Op::Cos(x) => {
                if mark(x) {
                    ctx.acc_unary(lo, x, g, |xv, gv| -gv * xv.sin());
                }
            }
            Op::Sqrt(x) => {
                if mark(x) {
                    let two = T::lit(2.0);
                    ctx.acc_unary_out(
                        lo,
                        x,
                        g,
                        out,
                        |yv, gv| {
                            if yv == T::zero() {
                                T::zero()
                            } else {
                                gv / (two * yv)
                            }
                        },
                    );
                }
            }
            Op::Abs(x) => {
                if mark(x) {
                    ctx.acc_unary(lo, x, g, |xv, gv| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                }
            }
            Op::Clamp(x, l, h) => {
                if mark(x) {
                    ctx.acc_unary(lo, x, g, |xv, gv| if xv > l && xv < h { gv } else { T::zero() });
                }
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (ctx.nodes[a.index()], ctx.nodes[b.index()]);
                let (m, k, n) = (na.shape.rows, na.shape.cols, nb.shape.cols);
                let xa = &values[na.offset..na.offset + m * k];
                let xb = &values[nb.offset..nb.offset + k * n];
                if mark(a) {
                    let da = &mut lo[na.offset..na.offset + m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &xb[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                s = s + gv * bv;
                            }
                            da[i * k + p] = da[i * k + p] + s;
                        }
                    }
                }
                if mark(b) {
                    let db = &mut lo[nb.offset..nb.offset + k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = xa[i * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + s * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if mark(x) {
                    let nx = ctx.nodes[x.index()];
                    let (r, c) = (nx.shape.rows, nx.shape.cols);
                    for i in 0..r {
                        for j in 0..c {
                            let d = &mut lo[nx.offset + i * c + j];
                            *d = *d + g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                if mark(x) {
                    let nx = ctx.nodes[x.index()];
                    let (r, c) = (nx.shape.rows, nx.shape.cols);
                    let scale = if matches!(node.op, Op::Mean(..)) {
                        T::one() / T::from_usize(r * c / node.shape.numel()).unwrap()
                    } else {
                        T::one()
                    };
                    for i in 0..r {
                        for j in 0..c {
                            let gv = match axis {
                                Axis::All => g[0],
                                Axis::Cols => g[i],
                                Axis::Rows => g[j],
                            };
                            let d = &mut lo[nx.offset + i * c + j];
                            *d = *d + gv * scale;
                        }
                    }
                }
            }
            Op::Concat { start, len } => {
                let parts = &extra[start as usize..(start + len) as usize];
                let cols = node.shape.cols;
                let mut col0 = 0;
                for &p in parts {
                    let np = ctx.nodes[p.index()];
                    let pc = np.shape.cols;
                    if mark(p) {
                        for i in 0..node.shape.rows {
                            for j in 0..pc {
                                let d = &mut lo[np.offset + i * pc + j];
                                *d = *d + g[i * cols + col0 + j];
                            }
                        }
                    }
                    col0 += pc;
                }
            }
            Op::Slice { x, start } => {
                if mark(x) {
                    let nx = ctx.nodes[x.index()];
                    let (len, xc) = (node.shape.cols, nx.shape.cols);
                    for i in 0..node.shape.rows {
                        for j in 0..len {
                            let d = &mut lo[nx.offset + i * xc + start as usize + j];
                            *d = *d + g[i * len + j];
                        }
                    }
                }
            }
            Op::L2Norm(x) => {
                if mark(x) {
                    let nx = ctx.nodes[x.index()];
                    let c = nx.shape.cols;
                    for i in 0..node.shape.rows {
                        let norm = out[i];
                        if norm == T::zero() {
                            continue;
                        }
                        let s = g[i] / norm;
                        for j in 0..c {
                            let xv = values[nx.offset + i * c + j];
                            let d = &mut lo[nx.offset + i * c + j];
                            *d = *d + s * xv;
                        }
                    }
                }
            }
            Op::Cross3(a, b) => {
                let (na, nb) = (ctx.nodes[a.index()], ctx.nodes[b.index()]);
                let (ga, gb) = (mark(a), mark(b));
                for i in 0..node.shape.rows {
                    let gi = &g[i * 3..i * 3 + 3];
                    let xa = &values[na.offset + ridx(na.shape, i, 3)..][..3];
                    let xb = &values[nb.offset + ridx(nb.shape, i, 3)..][..3];
                    if ga {
                        let d = cross(xb, gi);
                        let dst = &mut lo[na.offset + ridx(na.shape, i, 3)..][..3];
                        for k in 0..3 {
                            dst[k] = dst[k] + d[k];
                        }
                    }
                    if gb {
                        let d = cross(gi, xa);
                        let dst = &mut lo[nb.offset + ridx(nb.shape, i, 3)..][..3];
                        for k in 0..3 {
                            dst[k] = dst[k] + d[k];
                        }
                    }
                }
            }
            Op::Bmm3 { a, b, ta, tb } => {
                let (na, nb) = (ctx.nodes[a.index()], ctx.nodes[b.index()]);
                let (ga, gb) = (mark(a), mark(b));
                for i in 0..node.shape.rows {
                    let gi = &g[i * 9..i * 9 + 9];
                    let xa = &values[na.offset + ridx(na.shape, i, 9)..][..9];
                    let xb = &values[nb.offset + ridx(nb.shape, i, 9)..][..9];
                    if ga {
                        // d op(A) = G op(B)^T
                        let dst = &mut lo[na.offset + ridx(na.shape, i, 9)..][..9];
                        for r in 0..3 {
                            for c in 0..3 {
                                let mut s = T::zero();
                                for k in 0..3 {
                                    s = s + gi[r * 3 + k] * m3(xb, tb, c, k);
                                }
                                let idx = if ta { c * 3 + r } else { r * 3 + c };
                                dst[idx] = dst[idx] + s;
                            }
                        }
                    }
                    if gb {
                        // d op(B) = op(A)^T G
                        let dst = &mut lo[nb.offset + ridx(nb.shape, i, 9)..][..9];
                        for r in 0..3 {
                            for c in 0..3 {
                                let mut s = T::zero();
                                for k in 0..3 {
                                    s = s + m3(xa, ta, k, r) * gi[k * 3 + c];
                                }
                                let idx = if tb { c * 3 + r } else { r * 3 + c };
                                dst[idx] = dst[idx] + s;
                            }
                        }
                    }
                }
            }
            Op::Bmv3 { a, v, ta } => {
                let (na, nv) = (ctx.nodes[a.index()], ctx.nodes[v.index()]);
                let (ga, gv) = (mark(a), mark(v));
                for i in 0..node.shape.rows {
                    let gi = &g[i * 3..i * 3 + 3];
                    let xa = &values[na.offset + ridx(na.shape, i, 9)..][..9];
                    let xv = &values[nv.offset + ridx(nv.shape, i, 3)..][..3];
                    if ga {
                        let dst = &mut lo[na.offset + ridx(na.shape, i, 9)..][..9];
                        for r in 0..3 {
                            for c in 0..3 {
                                let idx = if ta { c * 3 + r } else { r * 3 + c };
                                dst[idx] = dst[idx] + gi[r] * xv[c];
                            }
                        }
                    }
                    if gv {
                        let dst = &mut lo[nv.offset + ridx(nv.shape, i, 3)..][..3];
                        for c in 0..3 {
                            let mut s = T::zero();
                            for r in 0..3 {
                                s = s + m3(xa, ta, r, c) * gi[r];
                            }
                            dst[c] = dst[c] + s;
                        }
                    }
                }
            }
        }
    }
}

struct Ctx<'a, T: Real> {
    nodes: &'a [Node<T>],
    values: &'a [T],
}

impl<T: Real> Ctx<'_, T> {
    /// Value of `v` at flat position `k` of a broadcast output of shape `out`.
    #[inline]
    fn at(&self, v: Var, out: Shape, k: usize) -> T {
        let n = &self.nodes[v.index()];
        if n.shape == out {
            self.values[n.offset + k]
        } else {
            self.values[n.offset + bidx(n.shape, k / out.cols, k % out.cols)]
        }
    }

    /// Accumulates `f(k, g[k])` into the adjoint of `dst`, summing over
    /// broadcast dimensions.
    #[inline]
    fn acc_broadcast(&self, lo: &mut [T], dst: Var, out: Shape, g: &[T], f: impl Fn(usize, T) -> T) {
        let n = &self.nodes[dst.index()];
        if n.shape == out {
            for (k, (d, &gv)) in lo[n.offset..n.offset + out.numel()].iter_mut().zip(g).enumerate() {
                *d = *d + f(k, gv);
            }
        } else {
            for (k, &gv) in g.iter().enumerate() {
                let idx = n.offset + bidx(n.shape, k / out.cols, k % out.cols);
                lo[idx] = lo[idx] + f(k, gv);
            }
        }
    }

    #[inline]
    fn acc_unary(&self, lo: &mut [T], x: Var, g: &[T], f: impl Fn(T, T) -> T) {
        let n = &self.nodes[x.index()];
        let xs = &self.values[n.offset..n.offset + g.len()];
        for ((d, &gv), &xv) in lo[n.offset..n.offset + g.len()].iter_mut().zip(g).zip(xs) {
            *d = *d + f(xv, gv);
        }
    }

    #[inline]
    fn acc_unary_out(&self, lo: &mut [T], x: Var, g: &[T], out: &[T], f: impl Fn(T, T) -> T) {
        let n = &self.nodes[x.index()];
        for ((d, &gv), &yv) in lo[n.offset..n.offset + g.len()].iter_mut().zip(g).zip(out) {
            *d = *d + f(yv, gv);
        }
    }
}
