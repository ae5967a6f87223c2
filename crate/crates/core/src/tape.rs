//! Minimal reverse-mode differentiation tape.
//!
//! Every learnable computation in the network is composed from the
//! operators here: affine layers, leaky rectifier, sigmoid, masked
//! max-pool / softmax over neighbor slots, gather with scatter-add
//! backward, strided 2D convolution, concatenation and elementwise
//! arithmetic. One training step owns one tape.

use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

/// Backward closure: given (own value, upstream gradient, parent values),
/// produce one gradient tensor per parent.
type BackFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input (leaf). Gradients are collected for leaves too.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Alias for `var`; used for values we never differentiate against.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.var(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Returns one optional gradient per
    /// node index; `None` means the node does not influence the root.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let root_val = &self.nodes[root.0].value;
        let mut seed = Tensor::zeros(root_val.shape());
        for g in seed.data_mut() {
            *g = 1.0;
        }
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let pgrads = back(&node.value, &g, &parent_vals);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, g, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, g, _| {
                let mut ng = g.clone();
                for v in ng.data_mut() {
                    *v = -*v;
                }
                vec![g.clone(), ng]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|_, g, parents| {
                let (av, bv) = (parents[0], parents[1]);
                let mut ga = g.clone();
                for (x, w) in ga.data_mut().iter_mut().zip(bv.data()) {
                    *x *= w;
                }
                let mut gb = g.clone();
                for (x, w) in gb.data_mut().iter_mut().zip(av.data()) {
                    *x *= w;
                }
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g, _| {
                let mut ga = g.clone();
                for v in ga.data_mut() {
                    *v *= c;
                }
                vec![ga]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g, parents| {
                let mut ga = g.clone();
                for (gv, &x) in ga.data_mut().iter_mut().zip(parents[0].data()) {
                    if x <= 0.0 {
                        *gv *= slope;
                    }
                }
                vec![ga]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(
            out,
            vec![a],
            Some(Box::new(|out, g, _| {
                let mut ga = g.clone();
                for (gv, &s) in ga.data_mut().iter_mut().zip(out.data()) {
                    *gv *= s * (1.0 - s);
                }
                vec![ga]
            })),
        )
    }

    /// View with a different shape; element count unchanged.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshaped(shape).expect("reshape: size mismatch");
        let old_shape = self.value(a).shape().to_vec();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |_, g, _| {
                vec![g.reshaped(&old_shape).unwrap()]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |_, g, _| {
                let gv = g.item();
                let mut out = Tensor::zeros(&shape);
                for v in out.data_mut() {
                    *v = gv;
                }
                vec![out]
            })),
        )
    }

    // ---- affine / mlp ----

    /// y = x·w + b over the trailing dimension; leading dims are batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(wv.shape().len(), 2, "linear: weight must be rank 2");
        let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), cin, "linear: input dim mismatch");
        assert_eq!(bv.len(), cout, "linear: bias dim mismatch");
        let rows = xv.len() / cin.max(1);
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = cout;
        let mut data = vec![0.0; rows * cout];
        let xd = xv.data();
        let wd = wv.data();
        let bd = bv.data();
        for r in 0..rows {
            let xr = &xd[r * cin..(r + 1) * cin];
            let or = &mut data[r * cout..(r + 1) * cout];
            or.copy_from_slice(bd);
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wr = &wd[i * cout..(i + 1) * cout];
                for (o, &wv) in or.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
        }
        let out = Tensor::from_vec(&out_shape, data).unwrap();
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |_, g, parents| {
                let (xv, wv) = (parents[0], parents[1]);
                let gd = g.data();
                let xd = xv.data();
                let wd = wv.data();
                // dx = g · wᵀ
                let mut gx = Tensor::zeros(xv.shape());
                {
                    let gxd = gx.data_mut();
                    for r in 0..rows {
                        let gr = &gd[r * cout..(r + 1) * cout];
                        let xr = &mut gxd[r * cin..(r + 1) * cin];
                        for i in 0..cin {
                            let wr = &wd[i * cout..(i + 1) * cout];
                            let mut acc = 0.0;
                            for (gv, wv) in gr.iter().zip(wr) {
                                acc += gv * wv;
                            }
                            xr[i] = acc;
                        }
                    }
                }
                // dw = xᵀ · g
                let mut gw = Tensor::zeros(&[cin, cout]);
                {
                    let gwd = gw.data_mut();
                    for r in 0..rows {
                        let xr = &xd[r * cin..(r + 1) * cin];
                        let gr = &gd[r * cout..(r + 1) * cout];
                        for (i, &xi) in xr.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let wr = &mut gwd[i * cout..(i + 1) * cout];
                            for (wv, gv) in wr.iter_mut().zip(gr) {
                                *wv += xi * gv;
                            }
                        }
                    }
                }
                // db = Σ rows of g
                let mut gb = Tensor::zeros(&[cout]);
                {
                    let gbd = gb.data_mut();
                    for r in 0..rows {
                        let gr = &gd[r * cout..(r + 1) * cout];
                        for (bv, gv) in gbd.iter_mut().zip(gr) {
                            *bv += gv;
                        }
                    }
                }
                vec![gx, gw, gb]
            })),
        )
    }

    /// Concatenate along the trailing dimension. Leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product::<usize>().max(1);
        let dims: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat: leading dims differ");
        }
        let total: usize = dims.iter().sum();
        let mut out_shape = lead.clone();
        out_shape.push(total);
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &d) in parts.iter().zip(&dims) {
            let pd = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + d]
                    .copy_from_slice(&pd[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let out = Tensor::from_vec(&out_shape, data).unwrap();
        let dims_c = dims.clone();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |_, g, parents| {
                let gd = g.data();
                let mut grads = Vec::with_capacity(dims_c.len());
                let mut off = 0;
                for (pv, &d) in parents.iter().zip(&dims_c) {
                    let mut gp = Tensor::zeros(pv.shape());
                    {
                        let gpd = gp.data_mut();
                        for r in 0..rows {
                            gpd[r * d..(r + 1) * d]
                                .copy_from_slice(&gd[r * total + off..r * total + off + d]);
                        }
                    }
                    grads.push(gp);
                    off += d;
                }
                grads
            })),
        )
    }

    // ---- neighbor-slot ops ----

    /// Gather rows of `features` (S×C) through a neighbor index table,
    /// producing n×K×C. Invalid slots yield zeros. Backward scatters
    /// gradients additively back to the source rows; duplicated indices
    /// accumulate.
    pub fn gather_rows(
        &mut self,
        features: Var,
        indices: Rc<Vec<u32>>,
        valid: Rc<Vec<bool>>,
        n: usize,
        k: usize,
    ) -> Var {
        let fv = self.value(features);
        assert_eq!(fv.shape().len(), 2, "gather: features must be S×C");
        let s = fv.shape()[0];
        let c = fv.shape()[1];
        assert_eq!(indices.len(), n * k, "gather: table size mismatch");
        let fd = fv.data();
        let mut data = vec![0.0; n * k * c];
        for i in 0..n * k {
            if valid[i] {
                let src = indices[i] as usize;
                debug_assert!(src < s);
                data[i * c..(i + 1) * c].copy_from_slice(&fd[src * c..(src + 1) * c]);
            }
        }
        let out = Tensor::from_vec(&[n, k, c], data).unwrap();
        let idx = Rc::clone(&indices);
        let val = Rc::clone(&valid);
        self.push(
            out,
            vec![features],
            Some(Box::new(move |_, g, parents| {
                let mut gf = Tensor::zeros(parents[0].shape());
                let gd = g.data();
                let gfd = gf.data_mut();
                for i in 0..n * k {
                    if val[i] {
                        let src = idx[i] as usize;
                        for ch in 0..c {
                            gfd[src * c + ch] += gd[i * c + ch];
                        }
                    }
                }
                vec![gf]
            })),
        )
    }

    /// Per-channel max over the K axis of an n×K×C tensor, skipping
    /// invalid slots. Rows with no valid slot produce zeros; the returned
    /// mask marks rows that had at least one valid slot. Backward routes
    /// the gradient to the first argmax slot only.
    pub fn maxpool_k(&mut self, x: Var, valid: Rc<Vec<bool>>) -> (Var, Vec<bool>) {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 3, "maxpool_k: expect n×K×C");
        let (n, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(valid.len(), n * k);
        let xd = xv.data();
        let mut data = vec![0.0; n * c];
        let mut argmax = vec![usize::MAX; n * c];
        let mut rows_ok = vec![false; n];
        for i in 0..n {
            let mut any = false;
            for kk in 0..k {
                if !valid[i * k + kk] {
                    continue;
                }
                let row = &xd[(i * k + kk) * c..(i * k + kk + 1) * c];
                if !any {
                    data[i * c..(i + 1) * c].copy_from_slice(row);
                    for ch in 0..c {
                        argmax[i * c + ch] = kk;
                    }
                    any = true;
                } else {
                    for ch in 0..c {
                        if row[ch] > data[i * c + ch] {
                            data[i * c + ch] = row[ch];
                            argmax[i * c + ch] = kk;
                        }
                    }
                }
            }
            rows_ok[i] = any;
        }
        let out = Tensor::from_vec(&[n, c], data).unwrap();
        let var = self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g, parents| {
                let mut gx = Tensor::zeros(parents[0].shape());
                let gd = g.data();
                let gxd = gx.data_mut();
                for i in 0..n {
                    for ch in 0..c {
                        let kk = argmax[i * c + ch];
                        if kk != usize::MAX {
                            gxd[(i * k + kk) * c + ch] += gd[i * c + ch];
                        }
                    }
                }
                vec![gx]
            })),
        );
        (var, rows_ok)
    }

    /// Masked, max-subtracted softmax over the K axis of n×K scores.
    /// Invalid slots come out exactly zero; all-invalid rows come out
    /// all-zero.
    pub fn softmax_k(&mut self, scores: Var, valid: Rc<Vec<bool>>) -> Var {
        let sv = self.value(scores);
        assert_eq!(sv.shape().len(), 2, "softmax_k: expect n×K");
        let (n, k) = (sv.shape()[0], sv.shape()[1]);
        assert_eq!(valid.len(), n * k);
        let sd = sv.data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for kk in 0..k {
                if valid[i * k + kk] {
                    mx = mx.max(sd[i * k + kk]);
                }
            }
            if !mx.is_finite() {
                continue;
            }
            let mut denom = 0.0;
            for kk in 0..k {
                if valid[i * k + kk] {
                    let e = (sd[i * k + kk] - mx).exp();
                    data[i * k + kk] = e;
                    denom += e;
                }
            }
            for kk in 0..k {
                data[i * k + kk] /= denom;
            }
        }
        let out = Tensor::from_vec(&[n, k], data).unwrap();
        let val = Rc::clone(&valid);
        self.push(
            out,
            vec![scores],
            Some(Box::new(move |out, g, parents| {
                let od = out.data();
                let gd = g.data();
                let mut gs = Tensor::zeros(parents[0].shape());
                let gsd = gs.data_mut();
                for i in 0..n {
                    let mut dot = 0.0;
                    for kk in 0..k {
                        if val[i * k + kk] {
                            dot += gd[i * k + kk] * od[i * k + kk];
                        }
                    }
                    for kk in 0..k {
                        if val[i * k + kk] {
                            gsd[i * k + kk] = od[i * k + kk] * (gd[i * k + kk] - dot);
                        }
                    }
                }
                vec![gs]
            })),
        )
    }

    /// out[i, c] = Σ_k a[i, k] · v[i, k, c]
    pub fn weighted_sum_k(&mut self, a: Var, v: Var) -> Var {
        let av = self.value(a);
        let vv = self.value(v);
        assert_eq!(av.shape().len(), 2);
        assert_eq!(vv.shape().len(), 3);
        let (n, k) = (av.shape()[0], av.shape()[1]);
        assert_eq!(vv.shape()[0], n);
        assert_eq!(vv.shape()[1], k);
        let c = vv.shape()[2];
        let ad = av.data();
        let vd = vv.data();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for kk in 0..k {
                let w = ad[i * k + kk];
                if w == 0.0 {
                    continue;
                }
                let row = &vd[(i * k + kk) * c..(i * k + kk + 1) * c];
                for ch in 0..c {
                    data[i * c + ch] += w * row[ch];
                }
            }
        }
        let out = Tensor::from_vec(&[n, c], data).unwrap();
        self.push(
            out,
            vec![a, v],
            Some(Box::new(move |_, g, parents| {
                let (av, vv) = (parents[0], parents[1]);
                let gd = g.data();
                let ad = av.data();
                let vd = vv.data();
                let mut ga = Tensor::zeros(av.shape());
                let mut gv = Tensor::zeros(vv.shape());
                {
                    let gad = ga.data_mut();
                    let gvd = gv.data_mut();
                    for i in 0..n {
                        for kk in 0..k {
                            let base = (i * k + kk) * c;
                            let mut acc = 0.0;
                            for ch in 0..c {
                                acc += gd[i * c + ch] * vd[base + ch];
                                gvd[base + ch] = ad[i * k + kk] * gd[i * c + ch];
                            }
                            gad[i * k + kk] = acc;
                        }
                    }
                }
                vec![ga, gv]
            })),
        )
    }

    /// Broadcast an n×C tensor to n×K×C. Backward sums over K.
    pub fn expand_k(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2, "expand_k: expect n×C");
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let xd = xv.data();
        let mut data = vec![0.0; n * k * c];
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            for kk in 0..k {
                data[(i * k + kk) * c..(i * k + kk + 1) * c].copy_from_slice(row);
            }
        }
        let out = Tensor::from_vec(&[n, k, c], data).unwrap();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g, parents| {
                let gd = g.data();
                let mut gx = Tensor::zeros(parents[0].shape());
                {
                    let gxd = gx.data_mut();
                    for i in 0..n {
                        for kk in 0..k {
                            for ch in 0..c {
                                gxd[i * c + ch] += gd[(i * k + kk) * c + ch];
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Zero out rows of an n×C tensor where the mask is false.
    pub fn mask_rows(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2, "mask_rows: expect n×C");
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(mask.len(), n);
        let mut data = xv.data().to_vec();
        for i in 0..n {
            if !mask[i] {
                for v in &mut data[i * c..(i + 1) * c] {
                    *v = 0.0;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c], data).unwrap();
        let m = Rc::clone(&mask);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g, _| {
                let mut gx = g.clone();
                {
                    let gd = gx.data_mut();
                    for i in 0..n {
                        if !m[i] {
                            for v in &mut gd[i * c..(i + 1) * c] {
                                *v = 0.0;
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Euclidean norm of each row of an n×C tensor, producing n values.
    /// Subgradient at the origin is zero.
    pub fn norm_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2, "norm_rows: expect n×C");
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let xd = xv.data();
        let mut data = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for ch in 0..c {
                let v = xd[i * c + ch];
                acc += v * v;
            }
            data[i] = acc.sqrt();
        }
        let out = Tensor::from_vec(&[n], data).unwrap();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |out, g, parents| {
                let od = out.data();
                let gd = g.data();
                let xd = parents[0].data();
                let mut gx = Tensor::zeros(parents[0].shape());
                {
                    let gxd = gx.data_mut();
                    for i in 0..n {
                        if od[i] > 0.0 {
                            let s = gd[i] / od[i];
                            for ch in 0..c {
                                gxd[i * c + ch] = s * xd[i * c + ch];
                            }
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Mean over masked entries of a length-n vector; 0 if the mask is empty.
    pub fn masked_mean(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 1, "masked_mean: expect vector");
        let n = xv.shape()[0];
        assert_eq!(mask.len(), n);
        let count = mask.iter().filter(|&&b| b).count();
        let s: f64 = if count == 0 {
            0.0
        } else {
            xv.data()
                .iter()
                .zip(mask.iter())
                .filter(|(_, &b)| b)
                .map(|(v, _)| v)
                .sum::<f64>()
                / count as f64
        };
        let m = Rc::clone(&mask);
        self.push(
            Tensor::scalar(s),
            vec![x],
            Some(Box::new(move |_, g, parents| {
                let mut gx = Tensor::zeros(parents[0].shape());
                if count > 0 {
                    let gv = g.item() / count as f64;
                    let gd = gx.data_mut();
                    for i in 0..n {
                        if m[i] {
                            gd[i] = gv;
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// Zero-padded strided 2D convolution over an H×W×Cin tensor with a
    /// kh×kw×Cin×Cout kernel. Padding is kh/2, kw/2.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        assert_eq!(xv.shape().len(), 3, "conv2d: input must be H×W×C");
        assert_eq!(wv.shape().len(), 4, "conv2d: kernel must be kh×kw×Cin×Cout");
        let (h, wd_, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kh, kw, wcin, cout) = (
            wv.shape()[0],
            wv.shape()[1],
            wv.shape()[2],
            wv.shape()[3],
        );
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert_eq!(bv.len(), cout);
        let (ph, pw) = (kh / 2, kw / 2);
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (wd_ + 2 * pw - kw) / stride + 1;
        let xd = xv.data();
        let kd = wv.data();
        let bd = bv.data();
        let mut data = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let out_row = &mut data[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                out_row.copy_from_slice(bd);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pw as isize;
                        if ix < 0 || ix >= wd_ as isize {
                            continue;
                        }
                        let xr = &xd[((iy as usize) * wd_ + ix as usize) * cin..][..cin];
                        let kr = &kd[(ky * kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xi) in xr.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let kcol = &kr[ci * cout..(ci + 1) * cout];
                            for (o, &kv) in out_row.iter_mut().zip(kcol) {
                                *o += xi * kv;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[ho, wo, cout], data).unwrap();
        self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |_, g, parents| {
                let (xv, wv) = (parents[0], parents[1]);
                let gd = g.data();
                let xd = xv.data();
                let kd = wv.data();
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                let mut gb = Tensor::zeros(&[cout]);
                {
                    let gxd = gx.data_mut();
                    let gwd = gw.data_mut();
                    let gbd = gb.data_mut();
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gr = &gd[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                            for (bv, gv) in gbd.iter_mut().zip(gr) {
                                *bv += gv;
                            }
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pw as isize;
                                    if ix < 0 || ix >= wd_ as isize {
                                        continue;
                                    }
                                    let xoff = ((iy as usize) * wd_ + ix as usize) * cin;
                                    let koff = (ky * kw + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let xi = xd[xoff + ci];
                                        let mut acc = 0.0;
                                        for co in 0..cout {
                                            let kv = kd[koff + ci * cout + co];
                                            acc += gr[co] * kv;
                                            gwd[koff + ci * cout + co] += xi * gr[co];
                                        }
                                        gxd[xoff + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            })),
        )
    }

    /// Nearest-copy upsampling of row features: out[i] = x[map[i]].
    /// Backward scatters additively.
    pub fn upsample_rows(&mut self, x: Var, map: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2, "upsample_rows: expect n×C");
        let c = xv.shape()[1];
        let n_out = map.len();
        let xd = xv.data();
        let mut data = vec![0.0; n_out * c];
        for (i, &src) in map.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&xd[src * c..(src + 1) * c]);
        }
        let out = Tensor::from_vec(&[n_out, c], data).unwrap();
        let m = Rc::clone(&map);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |_, g, parents| {
                let gd = g.data();
                let mut gx = Tensor::zeros(parents[0].shape());
                {
                    let gxd = gx.data_mut();
                    for (i, &src) in m.iter().enumerate() {
                        for ch in 0..c {
                            gxd[src * c + ch] += gd[i * c + ch];
                        }
                    }
                }
                vec![gx]
            })),
        )
    }

    /// General escape hatch for custom unary ops with a hand derivative.
    /// `back(out, grad_out, x_val) -> grad_x`.
    pub fn unary_op(
        &mut self,
        x: Var,
        out: Tensor,
        back: Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>,
    ) -> Var {
        self.push(
            out,
            vec![x],
            Some(Box::new(move |o, g, parents| vec![back(o, g, parents[0])])),
        )
    }
}
