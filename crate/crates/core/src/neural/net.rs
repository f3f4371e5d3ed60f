//! Relational graph actor and critic with hand-derived reverse mode.
//!
//! Trunk, shared by both heads:
//!
//! ```text
//! x_i   = relu(V·f_i + b_v)
//! u_e   = relu(E·[1/d, sin χ, cos χ] + b_e)
//! m_e   = relu(W1_r·[x_src ; u_e])
//! h1_i  = relu(S1·x_i + b_1 + Σ_r mean_{e ∈ N_r(i)} m_e)
//! h2_i  = relu(S2·h1_i + b_2 + Σ_r mean_{e ∈ N_r(i)} W2_r·h1_src)
//! z     = relu(O·[ω] + b_o)
//! h3_i  = relu(F·[h2_i ; z] + b_f)
//! ```
//!
//! The actor decodes `tanh(D·h3_i + b_d)` per vertex; the critic decodes
//! `D·mean_i(h3_i) + b_d` and sees the action as a fifth vertex feature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scene_graph::{EdgeRelation, SceneGraph};

const V_W: usize = 0;
const V_B: usize = 1;
const E_W: usize = 2;
const E_B: usize = 3;
const O_W: usize = 4;
const O_B: usize = 5;
const R1_W: usize = 6;
const S1_W: usize = 7;
const S1_B: usize = 8;
const R2_W: usize = 9;
const S2_W: usize = 10;
const S2_B: usize = 11;
const F_W: usize = 12;
const F_B: usize = 13;
const D_W: usize = 14;
const D_B: usize = 15;

const EDGE_DIM: usize = 3;
const RELS: usize = EdgeRelation::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Actor,
    Critic,
}

impl Head {
    pub fn input_dim(self) -> usize {
        match self {
            Head::Actor => 4,
            Head::Critic => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetShape {
    pub hidden: usize,
    pub omega_hidden: usize,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        for (key, value) in [("hidden", self.hidden), ("omega_hidden", self.omega_hidden)] {
            if value == 0 {
                return Err(Error::InvalidConfig {
                    key: format!("neural.{key}"),
                    reason: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            hidden: 32,
            omega_hidden: 16,
        }
    }
}

/// Parameters of one actor or critic network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNet {
    pub head: Head,
    pub shape: NetShape,
    pub params: ParamStore,
}

/// Activations cached by a forward pass.
///
/// `backward` takes the trace by value, so a trace cannot feed two backward
/// passes:
///
/// ```compile_fail
/// # use aim_morl::neural::{GraphNet, Head, NetShape, Upstream};
/// # use aim_morl::scene_graph::SceneGraph;
/// let mut net = GraphNet::zeros(Head::Actor, NetShape::default());
/// let (_, trace) = net.forward(&SceneGraph::empty(0.5), None).unwrap();
/// net.backward(trace, Upstream::Actions(&[]), true).unwrap();
/// net.backward(trace, Upstream::Actions(&[]), true).unwrap();
/// ```
#[derive(Debug)]
pub struct ForwardTrace {
    head: Head,
    n: usize,
    omega: f64,
    inputs: Vec<f64>,
    edges: Vec<(usize, usize, usize)>,
    edge_feats: Vec<f64>,
    /// 1 / (incoming edges of the same relation at the destination)
    edge_weight: Vec<f64>,
    x: Vec<f64>,
    u: Vec<f64>,
    msg: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    z: Vec<f64>,
    h3: Vec<f64>,
    /// Actor: per-vertex actions. Critic: a single value.
    out: Vec<f64>,
}

impl ForwardTrace {
    /// Hidden activations `(h1, h2, h3)`, each row-major `n × H`.
    pub fn hidden(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.h1, &self.h2, &self.h3)
    }

    /// On/off state of every ReLU unit evaluated in this pass.
    pub fn relu_pattern(&self) -> Vec<bool> {
        [&self.x, &self.u, &self.msg, &self.h1, &self.h2, &self.z, &self.h3]
            .into_iter()
            .flat_map(|layer| layer.iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Gradient arriving at the network output.
#[derive(Debug, Clone, Copy)]
pub enum Upstream<'a> {
    /// d loss / d action for every vertex (actor).
    Actions(&'a [f64]),
    /// d loss / d value (critic).
    Value(f64),
}

/// Gradients with respect to the network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    /// Row-major `n × input_dim`.
    pub vertex: Vec<f64>,
    pub input_dim: usize,
}

impl InputGrads {
    /// Gradient with respect to the action feature of every vertex (critic).
    pub fn actions(&self) -> Vec<f64> {
        self.vertex.chunks(self.input_dim).map(|r| r[4]).collect()
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `out += W·x` for row-major `W` of shape `rows × x.len()`.
#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `dx += Wᵀ·dy`.
#[inline]
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (&g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if g == 0.0 {
            continue;
        }
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// `dW += dy ⊗ x`.
#[inline]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if g == 0.0 {
            continue;
        }
        for (d, a) in row.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

fn relu_mask(grad: &mut [f64], post: &[f64]) {
    for (g, &p) in grad.iter_mut().zip(post) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

impl GraphNet {
    pub fn zeros(head: Head, shape: NetShape) -> Self {
        let h = shape.hidden;
        let ho = shape.omega_hidden;
        let mut p = ParamStore::new();
        let specs: [(&str, Vec<usize>); 16] = [
            ("v_enc.w", vec![h, head.input_dim()]),
            ("v_enc.b", vec![h]),
            ("e_enc.w", vec![h, EDGE_DIM]),
            ("e_enc.b", vec![h]),
            ("o_enc.w", vec![ho, 1]),
            ("o_enc.b", vec![ho]),
            ("rgcn1.w_rel", vec![RELS, h, 2 * h]),
            ("rgcn1.w_self", vec![h, h]),
            ("rgcn1.b", vec![h]),
            ("rgcn2.w_rel", vec![RELS, h, h]),
            ("rgcn2.w_self", vec![h, h]),
            ("rgcn2.b", vec![h]),
            ("ff.w", vec![h, h + ho]),
            ("ff.b", vec![h]),
            ("dec.w", vec![1, h]),
            ("dec.b", vec![1]),
        ];
        for (name, dims) in specs {
            p.push(name, Tensor::zeros(&dims));
        }
        Self {
            head,
            shape,
            params: p,
        }
    }

    pub fn new<R: Rng>(head: Head, shape: NetShape, rng: &mut R) -> Self {
        let mut net = Self::zeros(head, shape);
        let h = shape.hidden;
        let fan_in = [
            head.input_dim(),
            head.input_dim(),
            EDGE_DIM,
            EDGE_DIM,
            1,
            1,
            2 * h,
            h,
            h,
            h,
            h,
            h,
            h + shape.omega_hidden,
            h + shape.omega_hidden,
            h,
            h,
        ];
        net.params.init_uniform(&fan_in, rng);
        net
    }

    /// Runs the network on `g`. The critic requires one action per vertex.
    pub fn forward(&self, g: &SceneGraph, actions: Option<&[f64]>) -> Result<(Vec<f64>, ForwardTrace)> {
        self.forward_at(g, g.omega, actions)
    }

    /// Like [`GraphNet::forward`] with `omega` in place of the graph's own ω.
    pub fn forward_at(&self, g: &SceneGraph, omega: f64, actions: Option<&[f64]>) -> Result<(Vec<f64>, ForwardTrace)> {
        let n = g.num_vertices();
        let h = self.shape.hidden;
        let ho = self.shape.omega_hidden;
        let fdim = self.head.input_dim();
        let p = &self.params;
        let w = |slot: usize| p.tensor(slot).values.as_slice();

        let mut inputs = Vec::with_capacity(n * fdim);
        match (self.head, actions) {
            (Head::Actor, _) => {
                for f in &g.vertex_feats {
                    inputs.extend_from_slice(&f.as_array());
                }
            }
            (Head::Critic, Some(a)) if a.len() == n => {
                for (f, &ai) in g.vertex_feats.iter().zip(a) {
                    inputs.extend_from_slice(&f.as_array());
                    inputs.push(ai);
                }
            }
            (Head::Critic, other) => {
                return Err(Error::ActionCount {
                    expected: n,
                    got: other.map_or(0, <[f64]>::len),
                })
            }
        }

        let mut x = vec![0.0; n * h];
        for i in 0..n {
            let xi = &mut x[i * h..(i + 1) * h];
            xi.copy_from_slice(w(V_B));
            matvec_acc(w(V_W), &inputs[i * fdim..(i + 1) * fdim], xi);
            xi.iter_mut().for_each(|v| *v = relu(*v));
        }

        let m = g.edges.len();
        let mut counts = vec![0u32; n * RELS];
        let mut edges = Vec::with_capacity(m);
        let mut edge_feats = Vec::with_capacity(m * EDGE_DIM);
        for e in &g.edges {
            let r = e.relation.index();
            counts[e.dst * RELS + r] += 1;
            edges.push((e.src, e.dst, r));
            edge_feats.extend_from_slice(&[e.feature.inv_d, e.feature.chi.sin(), e.feature.chi.cos()]);
        }
        let edge_weight: Vec<f64> = edges
            .iter()
            .map(|&(_, dst, r)| 1.0 / f64::from(counts[dst * RELS + r]))
            .collect();

        let mut u = vec![0.0; m * h];
        let mut msg = vec![0.0; m * h];
        let mut agg = vec![0.0; n * h];
        let mut cat = vec![0.0; 2 * h];
        let r1 = w(R1_W);
        for (k, &(src, dst, r)) in edges.iter().enumerate() {
            let uk = &mut u[k * h..(k + 1) * h];
            uk.copy_from_slice(w(E_B));
            matvec_acc(w(E_W), &edge_feats[k * EDGE_DIM..(k + 1) * EDGE_DIM], uk);
            uk.iter_mut().for_each(|v| *v = relu(*v));
            cat[..h].copy_from_slice(&x[src * h..(src + 1) * h]);
            cat[h..].copy_from_slice(uk);
            let mk = &mut msg[k * h..(k + 1) * h];
            matvec_acc(&r1[r * h * 2 * h..(r + 1) * h * 2 * h], &cat, mk);
            mk.iter_mut().for_each(|v| *v = relu(*v));
            let c = edge_weight[k];
            for (a, &v) in agg[dst * h..(dst + 1) * h].iter_mut().zip(mk.iter()) {
                *a += c * v;
            }
        }

        let mut h1 = agg;
        for i in 0..n {
            let hi = &mut h1[i * h..(i + 1) * h];
            for (a, b) in hi.iter_mut().zip(w(S1_B)) {
                *a += b;
            }
            matvec_acc(w(S1_W), &x[i * h..(i + 1) * h], hi);
            hi.iter_mut().for_each(|v| *v = relu(*v));
        }

        let mut h2 = vec![0.0; n * h];
        let r2 = w(R2_W);
        let mut tmp = vec![0.0; h];
        for (k, &(src, dst, r)) in edges.iter().enumerate() {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            matvec_acc(&r2[r * h * h..(r + 1) * h * h], &h1[src * h..(src + 1) * h], &mut tmp);
            let c = edge_weight[k];
            for (a, &v) in h2[dst * h..(dst + 1) * h].iter_mut().zip(&tmp) {
                *a += c * v;
            }
        }
        for i in 0..n {
            let hi = &mut h2[i * h..(i + 1) * h];
            for (a, b) in hi.iter_mut().zip(w(S2_B)) {
                *a += b;
            }
            matvec_acc(w(S2_W), &h1[i * h..(i + 1) * h], hi);
            hi.iter_mut().for_each(|v| *v = relu(*v));
        }

        let mut z = w(O_B).to_vec();
        matvec_acc(w(O_W), &[omega], &mut z);
        z.iter_mut().for_each(|v| *v = relu(*v));

        let mut h3 = vec![0.0; n * h];
        let mut cat3 = vec![0.0; h + ho];
        cat3[h..].copy_from_slice(&z);
        for i in 0..n {
            cat3[..h].copy_from_slice(&h2[i * h..(i + 1) * h]);
            let hi = &mut h3[i * h..(i + 1) * h];
            hi.copy_from_slice(w(F_B));
            matvec_acc(w(F_W), &cat3, hi);
            hi.iter_mut().for_each(|v| *v = relu(*v));
        }

        let dec_w = w(D_W);
        let dec_b = w(D_B)[0];
        let out = match self.head {
            Head::Actor => (0..n)
                .map(|i| {
                    let pre: f64 = dec_w.iter().zip(&h3[i * h..(i + 1) * h]).map(|(a, b)| a * b).sum();
                    (pre + dec_b).tanh()
                })
                .collect(),
            Head::Critic => {
                if n == 0 {
                    vec![0.0]
                } else {
                    let mut pooled = vec![0.0; h];
                    for i in 0..n {
                        for (a, b) in pooled.iter_mut().zip(&h3[i * h..(i + 1) * h]) {
                            *a += b;
                        }
                    }
                    let inv = 1.0 / n as f64;
                    let q: f64 = dec_w.iter().zip(&pooled).map(|(a, b)| a * b * inv).sum();
                    vec![q + dec_b]
                }
            }
        };

        let trace = ForwardTrace {
            head: self.head,
            n,
            omega,
            inputs,
            edges,
            edge_feats,
            edge_weight,
            x,
            u,
            msg,
            h1,
            h2,
            z,
            h3,
            out: out.clone(),
        };
        Ok((out, trace))
    }

    /// Reverse pass. With `accumulate` the parameter gradients are added to
    /// each tensor's `grad`; input gradients are always returned.
    pub fn backward(&mut self, trace: ForwardTrace, upstream: Upstream<'_>, accumulate: bool) -> Result<InputGrads> {
        if trace.head != self.head {
            return Err(Error::Graph("trace was produced by a different head".into()));
        }
        let n = trace.n;
        let h = self.shape.hidden;
        let ho = self.shape.omega_hidden;
        let fdim = self.head.input_dim();
        if trace.x.len() != n * h || trace.z.len() != ho {
            return Err(Error::ShapeMismatch {
                name: "forward trace".into(),
                expected: vec![n, h],
                got: vec![trace.x.len()],
            });
        }

        let mut grads = self.params.take_grads();
        let result = self.backward_inner(&trace, upstream, accumulate, &mut grads, n, h, ho, fdim);
        self.params.restore_grads(grads);
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_inner(
        &self,
        t: &ForwardTrace,
        upstream: Upstream<'_>,
        acc: bool,
        grads: &mut [Vec<f64>],
        n: usize,
        h: usize,
        ho: usize,
        fdim: usize,
    ) -> Result<InputGrads> {
        let p = &self.params;
        let w = |slot: usize| p.tensor(slot).values.as_slice();
        let mut dinputs = vec![0.0; n * fdim];
        if n == 0 {
            return Ok(InputGrads {
                vertex: dinputs,
                input_dim: fdim,
            });
        }

        let dec_w = w(D_W);
        let mut dh3 = vec![0.0; n * h];
        match (self.head, upstream) {
            (Head::Actor, Upstream::Actions(da)) => {
                if da.len() != n {
                    return Err(Error::ActionCount { expected: n, got: da.len() });
                }
                for i in 0..n {
                    let a = t.out[i];
                    let dpre = da[i] * (1.0 - a * a);
                    if acc {
                        grads[D_B][0] += dpre;
                        outer_acc(&mut grads[D_W], &[dpre], &t.h3[i * h..(i + 1) * h]);
                    }
                    for (d, &wk) in dh3[i * h..(i + 1) * h].iter_mut().zip(dec_w) {
                        *d = dpre * wk;
                    }
                }
            }
            (Head::Critic, Upstream::Value(dq)) => {
                let inv = 1.0 / n as f64;
                if acc {
                    grads[D_B][0] += dq;
                    for i in 0..n {
                        outer_acc(&mut grads[D_W], &[dq * inv], &t.h3[i * h..(i + 1) * h]);
                    }
                }
                for i in 0..n {
                    for (d, &wk) in dh3[i * h..(i + 1) * h].iter_mut().zip(dec_w) {
                        *d = dq * inv * wk;
                    }
                }
            }
            _ => return Err(Error::Graph("upstream gradient does not match network head".into())),
        }

        // FF
        let mut dh2 = vec![0.0; n * h];
        let mut dz = vec![0.0; ho];
        let mut cat3 = vec![0.0; h + ho];
        cat3[h..].copy_from_slice(&t.z);
        let mut dcat3 = vec![0.0; h + ho];
        for i in 0..n {
            let dp = &mut dh3[i * h..(i + 1) * h];
            relu_mask(dp, &t.h3[i * h..(i + 1) * h]);
            cat3[..h].copy_from_slice(&t.h2[i * h..(i + 1) * h]);
            if acc {
                outer_acc(&mut grads[F_W], dp, &cat3);
                for (g, d) in grads[F_B].iter_mut().zip(dp.iter()) {
                    *g += d;
                }
            }
            dcat3.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(w(F_W), dp, &mut dcat3);
            dh2[i * h..(i + 1) * h].copy_from_slice(&dcat3[..h]);
            for (a, b) in dz.iter_mut().zip(&dcat3[h..]) {
                *a += b;
            }
        }

        relu_mask(&mut dz, &t.z);
        if acc {
            outer_acc(&mut grads[O_W], &dz, &[t.omega]);
            for (g, d) in grads[O_B].iter_mut().zip(&dz) {
                *g += d;
            }
        }

        // layer 2
        let mut dh1 = vec![0.0; n * h];
        for i in 0..n {
            let dp = &mut dh2[i * h..(i + 1) * h];
            relu_mask(dp, &t.h2[i * h..(i + 1) * h]);
            if acc {
                outer_acc(&mut grads[S2_W], dp, &t.h1[i * h..(i + 1) * h]);
                for (g, d) in grads[S2_B].iter_mut().zip(dp.iter()) {
                    *g += d;
                }
            }
            matvec_t_acc(w(S2_W), dp, &mut dh1[i * h..(i + 1) * h]);
        }
        let r2 = w(R2_W);
        let mut gk = vec![0.0; h];
        for (k, &(src, dst, r)) in t.edges.iter().enumerate() {
            let c = t.edge_weight[k];
            for (g, &d) in gk.iter_mut().zip(&dh2[dst * h..(dst + 1) * h]) {
                *g = c * d;
            }
            if acc {
                outer_acc(&mut grads[R2_W][r * h * h..(r + 1) * h * h], &gk, &t.h1[src * h..(src + 1) * h]);
            }
            matvec_t_acc(&r2[r * h * h..(r + 1) * h * h], &gk, &mut dh1[src * h..(src + 1) * h]);
        }

        // layer 1
        let mut dx = vec![0.0; n * h];
        for i in 0..n {
            let dp = &mut dh1[i * h..(i + 1) * h];
            relu_mask(dp, &t.h1[i * h..(i + 1) * h]);
            if acc {
                outer_acc(&mut grads[S1_W], dp, &t.x[i * h..(i + 1) * h]);
                for (g, d) in grads[S1_B].iter_mut().zip(dp.iter()) {
                    *g += d;
                }
            }
            matvec_t_acc(w(S1_W), dp, &mut dx[i * h..(i + 1) * h]);
        }
        let r1 = w(R1_W);
        let mut cat = vec![0.0; 2 * h];
        let mut dcat = vec![0.0; 2 * h];
        for (k, &(src, dst, r)) in t.edges.iter().enumerate() {
            let c = t.edge_weight[k];
            let mk = &t.msg[k * h..(k + 1) * h];
            let mut any = false;
            for ((g, &d), &mv) in gk.iter_mut().zip(&dh1[dst * h..(dst + 1) * h]).zip(mk) {
                *g = if mv > 0.0 { c * d } else { 0.0 };
                any |= *g != 0.0;
            }
            if !any {
                continue;
            }
            let uk = &t.u[k * h..(k + 1) * h];
            cat[..h].copy_from_slice(&t.x[src * h..(src + 1) * h]);
            cat[h..].copy_from_slice(uk);
            let block = r * h * 2 * h..(r + 1) * h * 2 * h;
            if acc {
                outer_acc(&mut grads[R1_W][block.clone()], &gk, &cat);
            }
            dcat.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&r1[block], &gk, &mut dcat);
            for (a, b) in dx[src * h..(src + 1) * h].iter_mut().zip(&dcat[..h]) {
                *a += b;
            }
            if acc {
                let du = &mut dcat[h..];
                relu_mask(du, uk);
                outer_acc(&mut grads[E_W], du, &t.edge_feats[k * EDGE_DIM..(k + 1) * EDGE_DIM]);
                for (g, d) in grads[E_B].iter_mut().zip(du.iter()) {
                    *g += d;
                }
            }
        }

        // vertex encoder
        for i in 0..n {
            let dp = &mut dx[i * h..(i + 1) * h];
            relu_mask(dp, &t.x[i * h..(i + 1) * h]);
            let fi = &t.inputs[i * fdim..(i + 1) * fdim];
            if acc {
                outer_acc(&mut grads[V_W], dp, fi);
                for (g, d) in grads[V_B].iter_mut().zip(dp.iter()) {
                    *g += d;
                }
            }
            matvec_t_acc(w(V_W), dp, &mut dinputs[i * fdim..(i + 1) * fdim]);
        }

        Ok(InputGrads {
            vertex: dinputs,
            input_dim: fdim,
        })
    }
}

/// Per-vertex actions in `[−1, 1]`.
pub fn actor_forward(net: &GraphNet, g: &SceneGraph) -> Result<Vec<f64>> {
    Ok(net.forward(g, None)?.0)
}

/// Scalar value of a joint action; zero for an empty graph.
pub fn critic_forward(net: &GraphNet, g: &SceneGraph, actions: &[f64]) -> Result<f64> {
    Ok(net.forward(g, Some(actions))?.0[0])
}
