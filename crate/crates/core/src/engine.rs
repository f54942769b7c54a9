//! Batched evaluation engine for training.
//!
//! Training evaluates network outputs and their input derivatives at a few
//! hundred points per iteration, forty thousand times. Doing that on the
//! scalar expression graph would spend the whole budget on node dispatch, so
//! the trainer lowers each loss term onto this tape of dense matrix
//! operations: rows are batch points, GEMMs carry the layer work, and one
//! reverse sweep yields parameter gradients.
//!
//! Input derivatives (`u_x`, `u_xx`, `u_t`, ...) are computed by propagating
//! tangent channels alongside the value channel through the layers; the
//! channels are themselves tape ops, so the reverse sweep differentiates
//! through them and mixed parameter/input derivatives come out exact.
//!
//! The scalar graph in [`crate::autodiff`] remains the reference semantics;
//! the two paths are held together by equivalence tests on small networks.

use ndarray::{concatenate, s, Array2, Axis};

use crate::network::Mlp;

/// Tensor id on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tid(usize);

enum Op {
    /// Differentiable leaf (network weights/biases, trainable constants).
    Leaf,
    /// Non-differentiable input data.
    Const,
    MatMul(Tid, Tid),
    /// Matrix plus a broadcast 1 x n row.
    AddBias(Tid, Tid),
    Tanh(Tid),
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    Div(Tid, Tid),
    Neg(Tid),
    Square(Tid),
    Sqrt(Tid),
    Scale(Tid, f64),
    AddConst(Tid),
    /// Matrix times a broadcast 1 x 1 tensor.
    MulScalar(Tid, Tid),
    /// Mean over all elements, yielding 1 x 1.
    Mean(Tid),
    ConcatCols(Tid, Tid),
    SliceCols(Tid, usize, usize),
    /// 1.0 where a >= b else 0.0; gradients do not flow through.
    GeMask,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Grads {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, t: Tid) -> Option<&Array2<f64>> {
        self.by_node[t.0].as_ref()
    }
}

/// A dynamic tape of matrix operations, rebuilt every iteration.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Tid {
        self.nodes.push(Node { value, op });
        Tid(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tid) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    /// Convenience for 1 x 1 tensors.
    pub fn scalar_value(&self, t: Tid) -> f64 {
        let v = self.value(t);
        assert_eq!(v.dim(), (1, 1), "expected scalar tensor");
        v[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Tid {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Tid {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: Tid, bias: Tid) -> Tid {
        assert_eq!(self.value(bias).nrows(), 1);
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn square(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Tid) -> Tid {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: Tid, c: f64) -> Tid {
        let v = self.value(a).mapv(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Tid, c: f64) -> Tid {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_scalar(&mut self, a: Tid, scalar: Tid) -> Tid {
        assert_eq!(self.value(scalar).dim(), (1, 1));
        let c = self.value(scalar)[[0, 0]];
        let v = self.value(a).mapv(|x| c * x);
        self.push(v, Op::MulScalar(a, scalar))
    }

    pub fn mean(&mut self, a: Tid) -> Tid {
        let m = self.value(a).mean().unwrap();
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    pub fn concat_cols(&mut self, a: Tid, b: Tid) -> Tid {
        let v = concatenate![Axis(1), self.value(a).view(), self.value(b).view()];
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Tid, start: usize, end: usize) -> Tid {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn ge_mask(&mut self, a: Tid, b: Tid) -> Tid {
        let mut v = Array2::zeros(self.value(a).raw_dim());
        ndarray::Zip::from(&mut v)
            .and(self.value(a))
            .and(self.value(b))
            .for_each(|out, &x, &y| *out = if x >= y { 1.0 } else { 0.0 });
        self.push(v, Op::GeMask)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Tid) -> Tid {
        let n = self.neg(a);
        self.add_const(n, 1.0)
    }

    /// Reverse sweep from a 1 x 1 root.
    ///
    /// The returned [`Grads`] retains gradients for leaves only;
    /// intermediate gradients are consumed as the sweep passes them.
    pub fn backward(&self, root: Tid) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward roots must be scalar"
        );
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(a, bias) => {
                    let db = g
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &g * &y.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = &g / bv;
                    let db = -&(&g * &self.nodes[idx].value) / bv;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.mapv(|x| -x)),
                Op::Square(a) => {
                    let da = 2.0 * &(&g * self.value(*a));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let da = &g / &(2.0 * &self.nodes[idx].value);
                    accumulate(&mut grads, *a, da);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.mapv(|x| c * x)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::MulScalar(a, scalar) => {
                    let c = self.value(*scalar)[[0, 0]];
                    let da = g.mapv(|x| c * x);
                    let ds = (&g * self.value(*a)).sum();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *scalar, Array2::from_elem((1, 1), ds));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let share = g[[0, 0]] / av.len() as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(av.raw_dim(), share));
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    let da = g.slice(s![.., ..na]).to_owned();
                    let db = g.slice(s![.., na..]).to_owned();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.value(*a).raw_dim());
                    da.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::GeMask(_, _) => {}
            }
        }
        Grads { by_node: grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], t: Tid, contribution: Array2<f64>) {
    match &mut grads[t.0] {
        Some(existing) => *existing += &contribution,
        slot => *slot = Some(contribution),
    }
}

/// Which input columns need tangent channels. Every second-order column must
/// also appear among the first-order columns.
#[derive(Clone, Debug, Default)]
pub struct ChannelSpec {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl ChannelSpec {
    pub fn value_only() -> Self {
        ChannelSpec::default()
    }

    pub fn with_first(cols: &[usize]) -> Self {
        ChannelSpec {
            first: cols.to_vec(),
            second: Vec::new(),
        }
    }

    pub fn with_second(first: &[usize], second: &[usize]) -> Self {
        let spec = ChannelSpec {
            first: first.to_vec(),
            second: second.to_vec(),
        };
        for c in &spec.second {
            assert!(
                spec.first.contains(c),
                "second-order channel {c} needs its first-order channel"
            );
        }
        spec
    }
}

/// Network outputs plus requested input-derivative channels, all N x n_out.
pub struct NetChannels {
    pub value: Tid,
    first: Vec<(usize, Tid)>,
    second: Vec<(usize, Tid)>,
}

impl NetChannels {
    /// First derivative of the outputs with respect to input column `col`.
    pub fn d1(&self, col: usize) -> Tid {
        self.first
            .iter()
            .find(|(c, _)| *c == col)
            .map(|(_, t)| *t)
            .expect("first-derivative channel not requested")
    }

    /// Second derivative with respect to input column `col`.
    pub fn d2(&self, col: usize) -> Tid {
        self.second
            .iter()
            .find(|(c, _)| *c == col)
            .map(|(_, t)| *t)
            .expect("second-derivative channel not requested")
    }
}

/// A network's parameters registered as leaves on a tape.
pub struct TapeNet {
    weights: Vec<Tid>,
    biases: Vec<Tid>,
    sizes: Vec<usize>,
}

impl TapeNet {
    /// Registers the current parameters of `mlp` as differentiable leaves.
    pub fn insert(tape: &mut Tape, mlp: &Mlp) -> TapeNet {
        let sizes = mlp.layer_sizes().to_vec();
        let params = mlp.params();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let wmat = Array2::from_shape_vec(
                (n_in, n_out),
                params[offset..offset + n_in * n_out].to_vec(),
            )
            .unwrap();
            offset += n_in * n_out;
            let bmat =
                Array2::from_shape_vec((1, n_out), params[offset..offset + n_out].to_vec())
                    .unwrap();
            offset += n_out;
            weights.push(tape.leaf(wmat));
            biases.push(tape.leaf(bmat));
        }
        TapeNet {
            weights,
            biases,
            sizes,
        }
    }

    pub fn param_count(&self) -> usize {
        crate::network::param_count(&self.sizes)
    }

    /// Forward pass over a batch (`input` is N x input_dim), propagating the
    /// requested tangent channels through every layer.
    ///
    /// For a hidden layer `a = tanh(z)` with incoming channels `(a, a_c,
    /// a_cc)` the outgoing channels are
    /// `a' = tanh(z)`, `a'_c = (1 - a'^2) z_c`,
    /// `a'_cc = (1 - a'^2) z_cc - 2 a' a'_c z_c`,
    /// each `z` channel being the previous channel times the weight matrix.
    pub fn forward(&self, tape: &mut Tape, input: Tid, spec: &ChannelSpec) -> NetChannels {
        let n = tape.value(input).nrows();
        let d = tape.value(input).ncols();
        assert_eq!(d, self.sizes[0], "input width mismatch");

        let mut value = input;
        let mut first: Vec<(usize, Tid)> = spec
            .first
            .iter()
            .map(|&c| {
                let mut seed = Array2::zeros((n, d));
                seed.column_mut(c).fill(1.0);
                (c, tape.constant(seed))
            })
            .collect();
        let mut second: Vec<(usize, Tid)> = spec
            .second
            .iter()
            .map(|&c| (c, tape.constant(Array2::zeros((n, d)))))
            .collect();

        let n_layers = self.sizes.len() - 1;
        for l in 0..n_layers {
            let w = self.weights[l];
            let z = {
                let m = tape.matmul(value, w);
                tape.add_bias(m, self.biases[l])
            };
            let z1: Vec<(usize, Tid)> = first
                .iter()
                .map(|&(c, t)| (c, tape.matmul(t, w)))
                .collect();
            let z2: Vec<(usize, Tid)> = second
                .iter()
                .map(|&(c, t)| (c, tape.matmul(t, w)))
                .collect();

            if l + 1 == n_layers {
                value = z;
                first = z1;
                second = z2;
            } else {
                let a = tape.tanh(z);
                let sq = tape.square(a);
                let p = tape.one_minus(sq);
                let a1: Vec<(usize, Tid)> =
                    z1.iter().map(|&(c, t)| (c, tape.mul(p, t))).collect();
                let a2: Vec<(usize, Tid)> = z2
                    .iter()
                    .map(|&(c, t)| {
                        let zc = z1.iter().find(|(cc, _)| *cc == c).unwrap().1;
                        let ac = a1.iter().find(|(cc, _)| *cc == c).unwrap().1;
                        let lin = tape.mul(p, t);
                        let aac = tape.mul(a, ac);
                        let curve = tape.mul(aac, zc);
                        let curve2 = tape.scale(curve, 2.0);
                        (c, tape.sub(lin, curve2))
                    })
                    .collect();
                value = a;
                first = a1;
                second = a2;
            }
        }
        NetChannels {
            value,
            first,
            second,
        }
    }

    /// Assembles the flat parameter gradient in the network's storage layout;
    /// zero where the reverse sweep never reached a block.
    pub fn grad_flat(&self, tape: &Tape, grads: &Grads) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            match grads.get(self.weights[l]) {
                Some(g) => flat.extend(g.iter().copied()),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(self.weights[l]).len())),
            }
            match grads.get(self.biases[l]) {
                Some(g) => flat.extend(g.iter().copied()),
                None => flat.extend(std::iter::repeat(0.0).take(tape.value(self.biases[l]).len())),
            }
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Binding, Expr, VarId};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of `backward` for an arbitrary scalar-valued
    /// tape program over differentiable leaves.
    fn fd_check(leaves: &[Array2<f64>], build: impl Fn(&mut Tape, &[Tid]) -> Tid) {
        let run = |values: &[Array2<f64>]| -> (f64, Vec<Option<Array2<f64>>>) {
            let mut tape = Tape::new();
            let tids: Vec<Tid> = values.iter().map(|v| tape.leaf(v.clone())).collect();
            let root = build(&mut tape, &tids);
            let value = tape.scalar_value(root);
            let grads = tape.backward(root);
            let leaf_grads = tids.iter().map(|t| grads.get(*t).cloned()).collect();
            (value, leaf_grads)
        };
        let (_, grads) = run(leaves);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for idx in 0..leaf.len() {
                let (r, c) = (idx / leaf.ncols(), idx % leaf.ncols());
                let mut up = leaves.to_vec();
                up[li][[r, c]] += h;
                let mut down = leaves.to_vec();
                down[li][[r, c]] -= h;
                let numeric = (run(&up).0 - run(&down).0) / (2.0 * h);
                let exact = grads[li]
                    .as_ref()
                    .map(|g| g[[r, c]])
                    .unwrap_or(0.0);
                let scale = exact.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (exact - numeric).abs() <= 1e-6 * scale,
                    "leaf {li} [{r},{c}]: exact {exact} vs fd {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_bias_tanh_backward() {
        fd_check(
            &[
                array![[0.3, -0.6], [0.9, 0.1], [-0.4, 0.8]],
                array![[0.5, -0.2, 0.7], [0.1, 0.4, -0.9]],
                array![[0.05, -0.3, 0.2]],
            ],
            |tape, t| {
                let m = tape.matmul(t[0], t[1]);
                let b = tape.add_bias(m, t[2]);
                let a = tape.tanh(b);
                let sq = tape.square(a);
                tape.mean(sq)
            },
        );
    }

    #[test]
    fn elementwise_ops_backward() {
        fd_check(
            &[
                array![[0.8, 1.3], [2.1, 0.4]],
                array![[1.5, 0.7], [0.9, 2.2]],
            ],
            |tape, t| {
                let q = tape.div(t[0], t[1]);
                let r = tape.sqrt(t[1]);
                let p = tape.mul(q, r);
                let s = tape.sub(p, t[0]);
                let n = tape.neg(s);
                let sc = tape.scale(n, 1.7);
                let ac = tape.add_const(sc, 0.25);
                let a = tape.add(ac, t[1]);
                let sq = tape.square(a);
                tape.mean(sq)
            },
        );
    }

    #[test]
    fn concat_slice_mulscalar_backward() {
        fd_check(
            &[
                array![[0.3], [0.7], [-0.2]],
                array![[1.2], [0.5], [0.8]],
                array![[0.6]],
            ],
            |tape, t| {
                let cat = tape.concat_cols(t[0], t[1]);
                let left = tape.slice_cols(cat, 0, 1);
                let right = tape.slice_cols(cat, 1, 2);
                let prod = tape.mul(left, right);
                let scaled = tape.mul_scalar(prod, t[2]);
                tape.mean(scaled)
            },
        );
    }

    #[test]
    fn ge_mask_blocks_gradient_but_selects_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0], [3.0], [2.0]]);
        let b = tape.leaf(array![[2.0], [2.0], [2.0]]);
        let mask = tape.ge_mask(a, b);
        assert_eq!(tape.value(mask), &array![[0.0], [1.0], [1.0]]);
        let masked = tape.mul(mask, a);
        let root = tape.mean(masked);
        let grads = tape.backward(root);
        // d(mean)/da flows only through the selected entries.
        assert_eq!(grads.get(a).unwrap(), &array![[0.0], [1.0 / 3.0], [1.0 / 3.0]]);
        assert!(grads.get(b).is_none());
    }

    fn net_channels_vs_expr(sizes: &[usize], spec: ChannelSpec) {
        let mlp = Mlp::glorot_init(37, sizes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let d = sizes[0];
        let pts =
            Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let net = TapeNet::insert(&mut tape, &mlp);
        let input = tape.constant(pts.clone());
        let out = net.forward(&mut tape, input, &spec);

        // Reference values through the expression graph.
        let vars = VarId::fresh_block(d);
        let inputs: Vec<Expr> = vars.iter().map(|v| Expr::var(*v)).collect();
        let sym = mlp.forward(&inputs).unwrap();
        for row in 0..n {
            let mut binding = Binding::new();
            for (j, v) in vars.iter().enumerate() {
                binding.set(*v, pts[[row, j]]);
            }
            mlp.bind_params(&mut binding);
            for k in 0..mlp.output_dim() {
                let want = sym[k].evaluate(&binding).unwrap();
                let got = tape.value(out.value)[[row, k]];
                assert_relative_eq!(got, want, max_relative = 1e-12);
                for &c in &spec.first {
                    let want = sym[k].differentiate(vars[c]).evaluate(&binding).unwrap();
                    let got = tape.value(out.d1(c))[[row, k]];
                    assert_relative_eq!(got, want, max_relative = 1e-10, epsilon = 1e-12);
                }
                for &c in &spec.second {
                    let want = sym[k]
                        .differentiate(vars[c])
                        .differentiate(vars[c])
                        .evaluate(&binding)
                        .unwrap();
                    let got = tape.value(out.d2(c))[[row, k]];
                    assert_relative_eq!(got, want, max_relative = 1e-10, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_forward_matches_expression_graph() {
        net_channels_vs_expr(&[2, 8, 8, 1], ChannelSpec::with_second(&[0, 1], &[0]));
        net_channels_vs_expr(&[3, 6, 6, 1], ChannelSpec::with_second(&[0, 1, 2], &[0, 1]));
        net_channels_vs_expr(&[2, 5, 5, 2], ChannelSpec::with_first(&[0]));
    }

    #[test]
    fn parameter_gradients_of_residual_match_expression_graph() {
        // Mean squared "residual" u_t - u_xx over a small batch, the shape of
        // the training hot path.
        let mlp = Mlp::glorot_init(11, &[2, 6, 6, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 3;
        let pts = Array2::from_shape_fn((n, 2), |_| rng.gen_range(0.05..0.95));

        let mut tape = Tape::new();
        let net = TapeNet::insert(&mut tape, &mlp);
        let input = tape.constant(pts.clone());
        let out = net.forward(&mut tape, input, &ChannelSpec::with_second(&[0, 1], &[0]));
        let resid = tape.sub(out.d1(1), out.d2(0));
        let sq = tape.square(resid);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        let flat = net.grad_flat(&tape, &grads);

        // Same loss on the expression graph.
        let mut total = Expr::constant(0.0);
        let mut binding = Binding::new();
        for row in 0..n {
            let vars = VarId::fresh_block(2);
            let inputs: Vec<Expr> = vars.iter().map(|v| Expr::var(*v)).collect();
            let u = mlp.forward(&inputs).unwrap().remove(0);
            let r = u.differentiate(vars[1]) - u.differentiate(vars[0]).differentiate(vars[0]);
            total = total + r.square();
            binding.set(vars[0], pts[[row, 0]]);
            binding.set(vars[1], pts[[row, 1]]);
        }
        total = total * Expr::constant(1.0 / n as f64);
        mlp.bind_params(&mut binding);

        assert_relative_eq!(
            tape.scalar_value(loss),
            total.evaluate(&binding).unwrap(),
            max_relative = 1e-12
        );
        let expr_grad = total.gradient(mlp.param_vars(), &binding).unwrap();
        assert_eq!(flat.len(), expr_grad.len());
        for (i, (a, b)) in flat.iter().zip(&expr_grad).enumerate() {
            let scale = a.abs().max(b.abs()).max(1e-10);
            assert!(
                (a - b).abs() <= 1e-9 * scale,
                "param {i}: engine {a} vs expr {b}"
            );
        }
    }

    #[test]
    fn gradient_flows_through_network_inputs() {
        // u evaluated at (s(t), t): the x-argument is another network's
        // output; d loss / d s-params must pick up u_x * ds/dbeta.
        let u = Mlp::glorot_init(3, &[2, 6, 1]).unwrap();
        let s = Mlp::glorot_init(4, &[1, 5, 1]).unwrap();
        let ts = array![[0.2], [0.8]];

        let mut tape = Tape::new();
        let unet = TapeNet::insert(&mut tape, &u);
        let snet = TapeNet::insert(&mut tape, &s);
        let t_in = tape.constant(ts.clone());
        let s_out = snet.forward(&mut tape, t_in, &ChannelSpec::value_only());
        let xt = tape.concat_cols(s_out.value, t_in);
        let u_out = unet.forward(&mut tape, xt, &ChannelSpec::value_only());
        let sq = tape.square(u_out.value);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        let s_flat = snet.grad_flat(&tape, &grads);

        // Finite differences over s parameters.
        let loss_for = |s_params: &[f64]| -> f64 {
            let mut s2 = s.clone();
            s2.set_params(s_params).unwrap();
            let mut acc = 0.0;
            for &tv in ts.iter() {
                let sv = s2.forward_values(&[tv]).unwrap()[0];
                let uv = u.forward_values(&[sv, tv]).unwrap()[0];
                acc += uv * uv;
            }
            acc / ts.len() as f64
        };
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let idx = rng.gen_range(0..s.param_count());
            let mut p = s.params().to_vec();
            let base = p[idx];
            p[idx] = base + h;
            let up = loss_for(&p);
            p[idx] = base - h;
            let down = loss_for(&p);
            let numeric = (up - down) / (2.0 * h);
            let exact = s_flat[idx];
            let scale = exact.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (exact - numeric).abs() <= 1e-5 * scale,
                "s param {idx}: exact {exact} vs fd {numeric}"
            );
        }
    }
}
