//! The recording tape: matrix-valued primitives with reverse-mode replay.
//!
//! Values live in one reusable arena; each node is an op descriptor plus an
//! output slot. Parameter blocks are copied into the arena when recorded, so
//! the tape owns everything it needs and can outlive the store borrow.
//! Backward accumulates into a caller-provided gradient vector aligned with
//! the store layout, which lets a training loop sum gradients over a batch
//! without intermediate allocations.

use crate::diffcore::{BlockId, DiffError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone)]
enum Op {
    /// External constant; no gradient.
    Input,
    /// Copy of a parameter block; backward scatters into the store gradient.
    Param { store_offset: usize },
    /// y = x w^T + b with x: r*k, w: m*k, b: 1*m.
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// y = a b^T with a: r*k, b: c*k.
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f64 },
    Relu { a: NodeId },
    /// Column-wise concatenation of equal-row parts.
    Concat { parts: Vec<NodeId> },
    /// Row gather: out[i] = table[idx[i]].
    GatherRows { table: NodeId, idx_off: usize, count: usize },
    /// Per-segment column-wise max; empty segments produce zeros. The argmax
    /// row per output cell is recorded for backward. CSR layout in aux.
    SegmentMax { x: NodeId, rows_out: usize, arg_off: usize },
    /// Per-segment column-wise sum; empty segments produce zeros.
    SegmentSum { x: NodeId, ptr_off: usize, rows_out: usize },
    /// Row-wise stable softmax.
    SoftmaxRows { a: NodeId },
    /// Elementwise natural log (caller guarantees positive inputs).
    Log { a: NodeId },
    /// Flattened inner product, a 1x1 output.
    Inner { a: NodeId, b: NodeId },
    /// Sum of all entries, a 1x1 output.
    SumAll { a: NodeId },
    /// Single entry, a 1x1 output.
    Pick { a: NodeId, r: usize, c: usize },
}

struct Node {
    op: Op,
    off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    aux: Vec<u32>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Clears recorded state but keeps allocations for reuse.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.aux.clear();
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0];
        &self.vals[n.off..n.off + n.rows * n.cols]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        self.nodes.push(Node { op, off, rows, cols });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, what: &str) -> DiffError {
        DiffError::ShapeMismatch(what.to_string())
    }

    // ---- recording primitives ----

    pub fn input(&mut self, data: &[f64], rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        if data.len() != rows * cols {
            return Err(self.mismatch("input data length vs rows*cols"));
        }
        let id = self.push(Op::Input, rows, cols);
        let n = &self.nodes[id.0];
        self.vals[n.off..n.off + data.len()].copy_from_slice(data);
        Ok(id)
    }

    pub fn scalar_input(&mut self, v: f64) -> NodeId {
        self.input(&[v], 1, 1).expect("1x1 input")
    }

    pub fn param(&mut self, store: &ParamStore, block: BlockId) -> NodeId {
        let spec = store.spec(block).clone();
        let id = self.push(Op::Param { store_offset: spec.offset }, spec.rows, spec.cols);
        let n = &self.nodes[id.0];
        let src = store.slice(block);
        self.vals[n.off..n.off + src.len()].copy_from_slice(src);
        id
    }

    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, DiffError> {
        let (r, k) = self.shape(x);
        let (m, k2) = self.shape(w);
        if k != k2 {
            return Err(self.mismatch("linear: inner dimensions"));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, m) {
                return Err(self.mismatch("linear: bias shape"));
            }
        }
        let id = self.push(Op::Linear { x, w, b }, r, m);
        let (xo, wo, oo) = (self.nodes[x.0].off, self.nodes[w.0].off, self.nodes[id.0].off);
        let bo = b.map(|b| self.nodes[b.0].off);
        for i in 0..r {
            let xrow = xo + i * k;
            let orow = oo + i * m;
            for j in 0..m {
                let wrow = wo + j * k;
                let mut acc = match bo {
                    Some(bo) => self.vals[bo + j],
                    None => 0.0,
                };
                for t in 0..k {
                    acc = self.vals[xrow + t].mul_add(self.vals[wrow + t], acc);
                }
                self.vals[orow + j] = acc;
            }
        }
        Ok(id)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (r, k) = self.shape(a);
        let (c, k2) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul_nt: inner dimensions"));
        }
        let id = self.push(Op::MatMulNt { a, b }, r, c);
        let (ao, bo, oo) = (self.nodes[a.0].off, self.nodes[b.0].off, self.nodes[id.0].off);
        for i in 0..r {
            for j in 0..c {
                let mut acc = 0.0;
                let (ar, br) = (ao + i * k, bo + j * k);
                for t in 0..k {
                    acc = self.vals[ar + t].mul_add(self.vals[br + t], acc);
                }
                self.vals[oo + i * c + j] = acc;
            }
        }
        Ok(id)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: fn(NodeId, NodeId) -> Op,
        f: fn(f64, f64) -> f64,
        name: &str,
    ) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (r, c) {
            return Err(self.mismatch(name));
        }
        let id = self.push(op(a, b), r, c);
        let (ao, bo, oo) = (self.nodes[a.0].off, self.nodes[b.0].off, self.nodes[id.0].off);
        for t in 0..r * c {
            self.vals[oo + t] = f(self.vals[ao + t], self.vals[bo + t]);
        }
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_elementwise(a, b, |a, b| Op::Add { a, b }, |x, y| x + y, "add: shapes")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_elementwise(a, b, |a, b| Op::Sub { a, b }, |x, y| x - y, "sub: shapes")
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.binary_elementwise(a, b, |a, b| Op::MulElem { a, b }, |x, y| x * y, "mul: shapes")
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let id = self.push(Op::Scale { a, k }, r, c);
        let (ao, oo) = (self.nodes[a.0].off, self.nodes[id.0].off);
        for t in 0..r * c {
            self.vals[oo + t] = k * self.vals[ao + t];
        }
        id
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let id = self.push(Op::Relu { a }, r, c);
        let (ao, oo) = (self.nodes[a.0].off, self.nodes[id.0].off);
        for t in 0..r * c {
            self.vals[oo + t] = self.vals[ao + t].max(0.0);
        }
        id
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(self.mismatch("concat: row counts"));
            }
            cols += c;
        }
        let id = self.push(Op::Concat { parts: parts.to_vec() }, rows, cols);
        let oo = self.nodes[id.0].off;
        let mut col_base = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            let po = self.nodes[p.0].off;
            for i in 0..r {
                for j in 0..c {
                    self.vals[oo + i * cols + col_base + j] = self.vals[po + i * c + j];
                }
            }
            col_base += c;
        }
        Ok(id)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[u32]) -> Result<NodeId, DiffError> {
        let (rows, cols) = self.shape(table);
        if idx.iter().any(|&i| i as usize >= rows) {
            return Err(self.mismatch("gather: index out of range"));
        }
        let idx_off = self.aux.len();
        self.aux.extend_from_slice(idx);
        let id = self.push(Op::GatherRows { table, idx_off, count: idx.len() }, idx.len(), cols);
        let (to, oo) = (self.nodes[table.0].off, self.nodes[id.0].off);
        for (i, &src) in idx.iter().enumerate() {
            let (s, d) = (to + src as usize * cols, oo + i * cols);
            for j in 0..cols {
                self.vals[d + j] = self.vals[s + j];
            }
        }
        Ok(id)
    }

    fn check_csr(
        &mut self,
        x: NodeId,
        seg_ptr: &[u32],
        seg_idx: &[u32],
    ) -> Result<usize, DiffError> {
        let (rows, _) = self.shape(x);
        if seg_ptr.is_empty() || *seg_ptr.last().unwrap() as usize != seg_idx.len() {
            return Err(self.mismatch("segments: ptr does not close index list"));
        }
        if seg_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(self.mismatch("segments: ptr not monotone"));
        }
        if seg_idx.iter().any(|&i| i as usize >= rows) {
            return Err(self.mismatch("segments: index out of range"));
        }
        let ptr_off = self.aux.len();
        self.aux.extend_from_slice(seg_ptr);
        self.aux.extend_from_slice(seg_idx);
        Ok(ptr_off)
    }

    /// Column-wise max over the input rows of each segment (CSR layout:
    /// segment `s` covers `seg_idx[seg_ptr[s]..seg_ptr[s+1]]`). Empty
    /// segments yield zero rows; ties keep the first listed row.
    pub fn segment_max(
        &mut self,
        x: NodeId,
        seg_ptr: &[u32],
        seg_idx: &[u32],
    ) -> Result<NodeId, DiffError> {
        let cols = self.shape(x).1;
        let rows_out = seg_ptr.len() - 1;
        let ptr_off = self.check_csr(x, seg_ptr, seg_idx)?;
        let arg_off = self.aux.len();
        self.aux.resize(arg_off + rows_out * cols, u32::MAX);
        let id = self.push(Op::SegmentMax { x, rows_out, arg_off }, rows_out, cols);
        let (xo, oo) = (self.nodes[x.0].off, self.nodes[id.0].off);
        for s in 0..rows_out {
            let (lo, hi) =
                (self.aux[ptr_off + s] as usize, self.aux[ptr_off + s + 1] as usize);
            for j in 0..cols {
                let mut best = 0.0;
                let mut best_row = u32::MAX;
                for t in lo..hi {
                    let row = self.aux[ptr_off + seg_ptr.len() + t];
                    let v = self.vals[xo + row as usize * cols + j];
                    if best_row == u32::MAX || v > best {
                        best = v;
                        best_row = row;
                    }
                }
                self.vals[oo + s * cols + j] = if best_row == u32::MAX { 0.0 } else { best };
                self.aux[arg_off + s * cols + j] = best_row;
            }
        }
        Ok(id)
    }

    /// Column-wise sum over the input rows of each segment.
    pub fn segment_sum(
        &mut self,
        x: NodeId,
        seg_ptr: &[u32],
        seg_idx: &[u32],
    ) -> Result<NodeId, DiffError> {
        let cols = self.shape(x).1;
        let rows_out = seg_ptr.len() - 1;
        let ptr_off = self.check_csr(x, seg_ptr, seg_idx)?;
        let id = self.push(Op::SegmentSum { x, ptr_off, rows_out }, rows_out, cols);
        let (xo, oo) = (self.nodes[x.0].off, self.nodes[id.0].off);
        for s in 0..rows_out {
            let (lo, hi) =
                (self.aux[ptr_off + s] as usize, self.aux[ptr_off + s + 1] as usize);
            for j in 0..cols {
                let mut acc = 0.0;
                for t in lo..hi {
                    let row = self.aux[ptr_off + seg_ptr.len() + t];
                    acc += self.vals[xo + row as usize * cols + j];
                }
                self.vals[oo + s * cols + j] = acc;
            }
        }
        Ok(id)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let id = self.push(Op::SoftmaxRows { a }, r, c);
        let (ao, oo) = (self.nodes[a.0].off, self.nodes[id.0].off);
        for i in 0..r {
            let row = ao + i * c;
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                max = max.max(self.vals[row + j]);
            }
            let mut sum = 0.0;
            for j in 0..c {
                let e = (self.vals[row + j] - max).exp();
                self.vals[oo + i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                self.vals[oo + i * c + j] /= sum;
            }
        }
        id
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let id = self.push(Op::Log { a }, r, c);
        let (ao, oo) = (self.nodes[a.0].off, self.nodes[id.0].off);
        for t in 0..r * c {
            self.vals[oo + t] = self.vals[ao + t].ln();
        }
        id
    }

    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (r, c) {
            return Err(self.mismatch("inner: shapes"));
        }
        let id = self.push(Op::Inner { a, b }, 1, 1);
        let (ao, bo, oo) = (self.nodes[a.0].off, self.nodes[b.0].off, self.nodes[id.0].off);
        let mut acc = 0.0;
        for t in 0..r * c {
            acc = self.vals[ao + t].mul_add(self.vals[bo + t], acc);
        }
        self.vals[oo] = acc;
        Ok(id)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let id = self.push(Op::SumAll { a }, 1, 1);
        let (ao, oo) = (self.nodes[a.0].off, self.nodes[id.0].off);
        let mut acc = 0.0;
        for t in 0..r * c {
            acc += self.vals[ao + t];
        }
        self.vals[oo] = acc;
        id
    }

    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId, DiffError> {
        let (rows, cols) = self.shape(a);
        if r >= rows || c >= cols {
            return Err(self.mismatch("pick: index out of range"));
        }
        let id = self.push(Op::Pick { a, r, c }, 1, 1);
        let (ao, oo) = (self.nodes[a.0].off, self.nodes[id.0].off);
        self.vals[oo] = self.vals[ao + r * cols + c];
        Ok(id)
    }

    // ---- reverse pass ----

    /// Backward from a scalar output with seed 1, accumulating parameter
    /// gradients into `grad` (aligned with the store layout).
    pub fn backward(&mut self, out: NodeId, grad: &mut [f64]) -> Result<(), DiffError> {
        let (r, c) = self.shape(out);
        if (r, c) != (1, 1) {
            return Err(DiffError::NotAScalar { rows: r, cols: c });
        }
        self.backward_seeded(out, &[1.0], grad)
    }

    /// Backward with an explicit adjoint seed for `out`. Lets callers fold a
    /// closed-form loss derivative into the recorded graph.
    pub fn backward_seeded(
        &mut self,
        out: NodeId,
        seed: &[f64],
        grad: &mut [f64],
    ) -> Result<(), DiffError> {
        let n = &self.nodes[out.0];
        if seed.len() != n.rows * n.cols {
            return Err(self.mismatch("backward: seed length"));
        }
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        self.adj[n.off..n.off + seed.len()].copy_from_slice(seed);

        for i in (0..=out.0).rev() {
            // Split borrows: the node table is read-only during replay.
            let Node { ref op, off, rows, cols } = self.nodes[i];
            match *op {
                Op::Input => {}
                Op::Param { store_offset } => {
                    for t in 0..rows * cols {
                        grad[store_offset + t] += self.adj[off + t];
                    }
                }
                Op::Linear { x, w, b } => {
                    let (r, k) = self.shape(x);
                    let m = cols;
                    let (xo, wo) = (self.nodes[x.0].off, self.nodes[w.0].off);
                    for i in 0..r {
                        let (orow, xrow) = (off + i * m, xo + i * k);
                        for j in 0..m {
                            let d = self.adj[orow + j];
                            if d == 0.0 {
                                continue;
                            }
                            let wrow = wo + j * k;
                            for t in 0..k {
                                self.adj[xrow + t] += d * self.vals[wrow + t];
                                self.adj[wrow + t] += d * self.vals[xrow + t];
                            }
                        }
                    }
                    if let Some(b) = b {
                        let bo = self.nodes[b.0].off;
                        for i in 0..r {
                            for j in 0..m {
                                self.adj[bo + j] += self.adj[off + i * m + j];
                            }
                        }
                    }
                }
                Op::MatMulNt { a, b } => {
                    let (r, k) = self.shape(a);
                    let c = cols;
                    let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    for i in 0..r {
                        for j in 0..c {
                            let d = self.adj[off + i * c + j];
                            if d == 0.0 {
                                continue;
                            }
                            let (ar, br) = (ao + i * k, bo + j * k);
                            for t in 0..k {
                                self.adj[ar + t] += d * self.vals[br + t];
                                self.adj[br + t] += d * self.vals[ar + t];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    for t in 0..rows * cols {
                        self.adj[ao + t] += self.adj[off + t];
                        self.adj[bo + t] += self.adj[off + t];
                    }
                }
                Op::Sub { a, b } => {
                    let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    for t in 0..rows * cols {
                        self.adj[ao + t] += self.adj[off + t];
                        self.adj[bo + t] -= self.adj[off + t];
                    }
                }
                Op::MulElem { a, b } => {
                    let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
                    for t in 0..rows * cols {
                        self.adj[ao + t] += self.adj[off + t] * self.vals[bo + t];
                        self.adj[bo + t] += self.adj[off + t] * self.vals[ao + t];
                    }
                }
                Op::Scale { a, k } => {
                    let ao = self.nodes[a.0].off;
                    for t in 0..rows * cols {
                        self.adj[ao + t] += k * self.adj[off + t];
                    }
                }
                Op::Relu { a } => {
                    let ao = self.nodes[a.0].off;
                    for t in 0..rows * cols {
                        if self.vals[off + t] > 0.0 {
                            self.adj[ao + t] += self.adj[off + t];
                        }
                    }
                }
                Op::Concat { ref parts } => {
                    let mut col_base = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let po = self.nodes[p.0].off;
                        for i in 0..r {
                            for j in 0..c {
                                self.adj[po + i * c + j] +=
                                    self.adj[off + i * cols + col_base + j];
                            }
                        }
                        col_base += c;
                    }
                }
                Op::GatherRows { table, idx_off, count } => {
                    let to = self.nodes[table.0].off;
                    for i in 0..count {
                        let src = self.aux[idx_off + i] as usize;
                        for j in 0..cols {
                            self.adj[to + src * cols + j] += self.adj[off + i * cols + j];
                        }
                    }
                }
                Op::SegmentMax { x, rows_out, arg_off } => {
                    let xo = self.nodes[x.0].off;
                    for s in 0..rows_out {
                        for j in 0..cols {
                            let row = self.aux[arg_off + s * cols + j];
                            if row != u32::MAX {
                                self.adj[xo + row as usize * cols + j] +=
                                    self.adj[off + s * cols + j];
                            }
                        }
                    }
                }
                Op::SegmentSum { x, ptr_off, rows_out } => {
                    let xo = self.nodes[x.0].off;
                    for s in 0..rows_out {
                        let (lo, hi) =
                            (self.aux[ptr_off + s] as usize, self.aux[ptr_off + s + 1] as usize);
                        for t in lo..hi {
                            let row = self.aux[ptr_off + rows_out + 1 + t] as usize;
                            for j in 0..cols {
                                self.adj[xo + row * cols + j] += self.adj[off + s * cols + j];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    let ao = self.nodes[a.0].off;
                    for i in 0..rows {
                        let (yrow, drow) = (off + i * cols, off + i * cols);
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += self.adj[drow + j] * self.vals[yrow + j];
                        }
                        for j in 0..cols {
                            self.adj[ao + i * cols + j] +=
                                self.vals[yrow + j] * (self.adj[drow + j] - dot);
                        }
                    }
                }
                Op::Log { a } => {
                    let ao = self.nodes[a.0].off;
                    for t in 0..rows * cols {
                        self.adj[ao + t] += self.adj[off + t] / self.vals[ao + t];
                    }
                }
                Op::Inner { a, b } => {
                    let d = self.adj[off];
                    if d != 0.0 {
                        let (r, c) = self.shape(a);
                        let (ao, bo) = (self.nodes[a.0].off, self.nodes[b.0].off);
                        for t in 0..r * c {
                            self.adj[ao + t] += d * self.vals[bo + t];
                            self.adj[bo + t] += d * self.vals[ao + t];
                        }
                    }
                }
                Op::SumAll { a } => {
                    let d = self.adj[off];
                    if d != 0.0 {
                        let (r, c) = self.shape(a);
                        let ao = self.nodes[a.0].off;
                        for t in 0..r * c {
                            self.adj[ao + t] += d;
                        }
                    }
                }
                Op::Pick { a, r, c } => {
                    let (_, ac) = self.shape(a);
                    let ao = self.nodes[a.0].off;
                    self.adj[ao + r * ac + c] += self.adj[off];
                }
            }
        }
        Ok(())
    }
}

/// Records `build` on a fresh tape and returns the scalar value with the
/// tape ready for [`Tape::backward`].
pub fn forward_scalar<F>(store: &ParamStore, build: F) -> Result<(f64, Tape, NodeId), DiffError>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<NodeId, DiffError>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let (r, c) = tape.shape(out);
    if (r, c) != (1, 1) {
        return Err(DiffError::NotAScalar { rows: r, cols: c });
    }
    let v = tape.value(out)[0];
    Ok((v, tape, out))
}

/// Restricts a full gradient to the contiguous layer-`l..=L` suffix.
pub fn grad_suffix<'g>(
    grad: &'g [f64],
    store: &ParamStore,
    l: usize,
) -> Result<&'g [f64], DiffError> {
    Ok(&grad[store.suffix_offset(l)?..])
}
