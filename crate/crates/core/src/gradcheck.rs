//! Central finite-difference checking of [`Graph::backward`].
//!
//! The numeric side only ever evaluates the forward closure, so it stays
//! independent of the reverse pass it is compared with.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentConfig, AgentError, Decode, Memory};
use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Shape, Tensor};
use crate::env::{synth_image, Image, ImageSpec};
use crate::grammar::{TokenId, EOS_ID};

/// Denominator floor for relative errors; keeps near-zero gradients from
/// turning rounding noise into large ratios.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of `loss_fn` against central differences with
/// step `h`, over every element of `targets` (at most `max_per_param`
/// evenly spaced elements per parameter).
pub fn check<E, F>(
    params: &mut ParamStore,
    targets: &[ParamId],
    h: f64,
    max_per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: Fn(&mut Graph<'_>) -> Result<NodeId, E>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        g.backward(loss).map_err(E::from)?
    };
    let eval = |p: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new(p);
        let loss = loss_fn(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for &pid in targets {
        let n = params.get(pid).len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let indices: Vec<usize> = (0..n).step_by(stride).collect();
        for i in indices {
            let orig = params.get(pid).data()[i];
            params.get_mut(pid).data_mut()[i] = orig + h;
            let fp = eval(params)?;
            params.get_mut(pid).data_mut()[i] = orig - h;
            let fm = eval(params)?;
            params.get_mut(pid).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = if params.is_trainable(pid) {
                analytic.get(pid)[i]
            } else {
                0.0
            };
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = String::from(params.name(pid));
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

// ── suites ───────────────────────────────────────────────────────────

fn rand_tensor<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> Tensor {
    Tensor::new(
        shape,
        (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Sums `out` against fixed random weights so every element reaches the loss.
fn project(g: &mut Graph<'_>, out: NodeId, seed: u64) -> Result<NodeId, AutodiffError> {
    let n = g.shape(out).numel();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::new(
        g.shape(out),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    ));
    let p = g.hadamard(out, w)?;
    Ok(g.sum_reduce(p))
}

fn check_op(
    shapes: &[Shape],
    build: impl Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId, AutodiffError>,
) -> Result<f64, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(shapes.len() as u64 * 7919 + 5);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), rand_tensor(&mut rng, *s), true))
        .collect();
    let report = check(&mut store, &ids, STEP, 64, |g| {
        let inputs: Vec<NodeId> = ids.iter().map(|p| g.param(*p)).collect();
        let out = build(g, &inputs)?;
        project(g, out, 99)
    })?;
    Ok(report.max_rel_err)
}

/// Finite-difference step used by the suites.
pub const STEP: f64 = 1e-5;

/// Maximum relative error of every graph op on random inputs.
pub fn op_suite() -> Result<Vec<(&'static str, f64)>, AutodiffError> {
    let v = Shape::vector;
    let m = Shape::matrix;
    Ok(vec![
        ("matmul mm", check_op(&[m(3, 4), m(4, 2)], |g, i| g.matmul(i[0], i[1]))?),
        ("matmul mv", check_op(&[m(3, 4), v(4)], |g, i| g.matmul(i[0], i[1]))?),
        ("matmul vm", check_op(&[v(3), m(3, 5)], |g, i| g.matmul(i[0], i[1]))?),
        ("add", check_op(&[v(5), v(5)], |g, i| g.add(i[0], i[1]))?),
        ("sub", check_op(&[v(5), v(5)], |g, i| g.sub(i[0], i[1]))?),
        ("hadamard", check_op(&[m(2, 3), m(2, 3)], |g, i| g.hadamard(i[0], i[1]))?),
        ("scale", check_op(&[v(4)], |g, i| Ok(g.scale(i[0], -1.7)))?),
        ("mul_scalar", check_op(&[v(4), v(1)], |g, i| g.mul_scalar(i[0], i[1]))?),
        ("concat", check_op(&[v(2), v(3)], |g, i| g.concat(i))?),
        ("slice", check_op(&[v(6)], |g, i| g.slice(i[0], 1, 3))?),
        ("reshape", check_op(&[m(2, 3)], |g, i| g.reshape(i[0], Shape::vector(6)))?),
        ("sigmoid", check_op(&[v(6)], |g, i| Ok(g.sigmoid(i[0])))?),
        ("tanh", check_op(&[v(6)], |g, i| Ok(g.tanh(i[0])))?),
        ("relu", check_op(&[v(6)], |g, i| Ok(g.relu(i[0])))?),
        ("softmax", check_op(&[v(6)], |g, i| g.softmax(i[0]))?),
        ("embedding_lookup", check_op(&[m(5, 3)], |g, i| g.embedding_lookup(i[0], &[4, 1, 4]))?),
        ("cosine_similarity", check_op(&[v(5), v(5)], |g, i| g.cosine_similarity(i[0], i[1]))?),
        ("column_cosine", check_op(&[m(4, 3), v(4)], |g, i| g.column_cosine(i[0], i[1]))?),
        ("cross_entropy logits", check_op(&[v(5)], |g, i| g.cross_entropy(i[0], 2, true))?),
        (
            "cross_entropy probs",
            check_op(&[v(5)], |g, i| {
                let p = g.softmax(i[0])?;
                g.cross_entropy(p, 3, false)
            })?,
        ),
        ("max_reduce", check_op(&[v(7)], |g, i| Ok(g.max_reduce(i[0])))?),
        ("mean_reduce", check_op(&[v(7)], |g, i| Ok(g.mean_reduce(i[0])))?),
        ("sum_reduce", check_op(&[v(7)], |g, i| Ok(g.sum_reduce(i[0])))?),
        ("outer", check_op(&[v(3), v(4)], |g, i| g.outer(i[0], i[1]))?),
        (
            "conv2d",
            check_op(&[Shape::volume(2, 5, 6), Shape::new(&[3, 2, 3, 3]), v(3)], |g, i| {
                g.conv2d(i[0], i[1], i[2])
            })?,
        ),
        ("max_pool2d", check_op(&[Shape::volume(2, 7, 6)], |g, i| g.max_pool2d(i[0], 3, 2, 1))?),
    ])
}

/// Tiny network dimensions for finite-difference checks.
pub fn toy_agent_config() -> AgentConfig {
    AgentConfig {
        embed_dim: 4,
        state_dim: 5,
        key_dim: 4,
        image_size: 8,
        conv_filters: vec![2, 3],
        encoder_hidden: 6,
        word_hidden: 5,
        gate_hidden: vec![4, 3],
        controller_hidden: vec![5, 4],
        extract_state: 3,
        extract_dim: 4,
        importance_hidden: vec![4, 3, 2],
        value_hidden: vec![4, 3],
        memory_slots: 3,
        read_temperature: 2.0,
        attention_temperature: 2.0,
        ..AgentConfig::desk()
    }
}

const TOY_VOCAB: usize = 8;

fn toy_agent(seed: u64) -> Result<(Agent, ParamStore, [Arc<Image>; 2]), AgentError> {
    let config = toy_agent_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let agent = Agent::init(config, TOY_VOCAB, &mut store, &mut rng)?;
    // Give the zero-initialised controller output layer some weight so its
    // gradients are exercised too.
    for id in agent.controller.params() {
        let shape = store.get(id).shape();
        let t = rand_tensor(&mut rng, shape);
        store.set(id, Tensor::new(shape, t.data().iter().map(|v| 0.3 * v).collect()))?;
    }
    // Zero biases over constant image regions put ReLUs exactly on their
    // kink; offset every bias slightly.
    let biases: Vec<ParamId> = store.iter().filter(|(_, n, _)| n.ends_with(".b")).map(|(id, _, _)| id).collect();
    for id in biases {
        let shape = store.get(id).shape();
        let t = rand_tensor(&mut rng, shape);
        store.set(id, Tensor::new(shape, t.data().iter().map(|v| 0.1 * v).collect()))?;
    }
    let spec = ImageSpec {
        size: 8,
        ..ImageSpec::default()
    };
    let images = [Arc::new(synth_image(&spec, "cat", 0)), Arc::new(synth_image(&spec, "dog", 1))];
    Ok((agent, store, images))
}

fn report(
    store: &mut ParamStore,
    targets: &[ParamId],
    loss: impl Fn(&mut Graph<'_>) -> Result<NodeId, AgentError>,
) -> Result<GradCheckReport, AgentError> {
    check(store, targets, STEP, 24, loss)
}

/// Finite-difference checks of each learner sub-network on a toy
/// configuration, plus one over a whole two-turn session. The value head
/// reads detached inputs, so it is checked on its own only.
pub fn agent_suite() -> Result<Vec<(&'static str, GradCheckReport)>, AgentError> {
    let (agent, mut store, images) = toy_agent(11)?;
    let a = &agent;
    let mut out = Vec::new();

    let enc: Vec<ParamId> = a
        .conv
        .iter()
        .flat_map(|(w, b)| [*w, *b])
        .chain(a.encoder_fc.params())
        .chain(a.encoder_key.params())
        .collect();
    out.push((
        "encoder",
        report(&mut store, &enc, |g| {
            let k = a.encode_image(g, &images[0])?;
            Ok(project(g, k, 1)?)
        })?,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mem_inputs = [
        store.add("probe.m_v", rand_tensor(&mut rng, Shape::matrix(4, 3)), true),
        store.add("probe.m_s", rand_tensor(&mut rng, Shape::matrix(4, 3)), true),
        store.add("probe.key", rand_tensor(&mut rng, Shape::vector(4)), true),
        store.add("probe.content", rand_tensor(&mut rng, Shape::vector(4)), true),
        store.add("probe.gate", Tensor::scalar(0.6), true),
        store.add("probe.query", rand_tensor(&mut rng, Shape::vector(4)), true),
    ];
    out.push((
        "memory read/write",
        report(&mut store, &mem_inputs, |g| {
            let [mv, ms, k, c, gate, q] = mem_inputs.map(|p| g.param(p));
            let mut mem = Memory::from_nodes(g, mv, ms)?;
            let before = a.memory_read(g, &mut mem, q)?;
            a.memory_write(g, &mut mem, k, c, gate)?;
            let after = a.memory_read(g, &mut mem, q)?;
            let s = g.add(before.r, after.r)?;
            let conf = a.confidence(g, after.r)?;
            let l = project(g, s, 2)?;
            Ok(g.add(l, conf)?)
        })?,
    ));

    let ext: Vec<ParamId> = a
        .extract_fwd
        .params()
        .into_iter()
        .chain(a.extract_bwd.params())
        .chain(a.extract_summary.params())
        .chain(a.extract_context.params())
        .chain(a.importance.params())
        .collect();
    out.push((
        "content extraction",
        report(&mut store, &ext, |g| {
            let ex = a.extract_content(g, &[4, 6, 2])?.expect("non-empty");
            let l = project(g, ex.content, 3)?;
            let im = g.scale(ex.importance, 2.0);
            Ok(g.add(l, im)?)
        })?,
    ));

    let word: Vec<ParamId> = a.word_mlp.params().into_iter().chain(a.gate.params()).collect();
    let h_probe = store.add("probe.h", rand_tensor(&mut rng, Shape::vector(5)), true);
    let r_probe = store.add("probe.r", rand_tensor(&mut rng, Shape::vector(4)), true);
    let mut targets = word.clone();
    targets.extend([h_probe, r_probe]);
    out.push((
        "fused word distribution",
        report(&mut store, &targets, |g| {
            let (h, r) = (g.param(h_probe), g.param(r_probe));
            let c = a.confidence(g, r)?;
            let p_r = a.memory_distribution(g, r)?;
            let f = a.fused_word_distribution(g, h, p_r, c)?;
            Ok(g.cross_entropy(f.p, 5, false)?)
        })?,
    ));

    let cell: Vec<ParamId> = a.cell.params().into_iter().chain(a.projection.params()).collect();
    out.push((
        "interpreter",
        report(&mut store, &cell, |g| {
            let mut s = a.begin_session(g);
            let t = a.interpret_turn(g, &mut s, &[3, 5], &images[0], true)?;
            let nll = t.nll.expect("imitation scored");
            let hl = project(g, t.h_i, 4)?;
            Ok(g.add(nll, hl)?)
        })?,
    ));

    let speak: Vec<ParamId> = a
        .controller
        .params()
        .into_iter()
        .chain(a.cell.params())
        .chain(a.word_mlp.params())
        .chain(a.gate.params())
        .collect();
    out.push((
        "controller and speaker",
        report(&mut store, &speak, |g| {
            let mut s = a.begin_session(g);
            let t = a.interpret_turn(g, &mut s, &[5], &images[0], false)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (_, u) = a.speak_turn(g, &mut s, &t, Decode::Forced(&[3, 5, EOS_ID]), &mut rng)?;
            Ok(g.scale(u.log_prob, -1.0))
        })?,
    ));

    out.push((
        "value head",
        report(&mut store, &a.value.params(), |g| {
            let h = g.param(h_probe);
            let c = g.constant(Tensor::scalar(0.7));
            let v = a.value_estimate(g, h, c, false)?;
            Ok(g.hadamard(v, v)?)
        })?,
    ));

    let all: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.is_trainable(id) && !store.name(id).starts_with("probe."))
        .collect();
    let turns: [(&[TokenId], usize, &[TokenId]); 2] = [(&[5], 0, &[5, EOS_ID]), (&[3], 1, &[5, EOS_ID])];
    let session = |g: &mut Graph<'_>, carried: Option<&[Vec<f64>]>| -> Result<(NodeId, Vec<Vec<f64>>), AgentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = a.begin_session(g);
        let mut terms = Vec::new();
        let mut states = Vec::new();
        for (i, (sentence, img, reply)) in turns.into_iter().enumerate() {
            let t = a.interpret_turn(g, &mut s, sentence, &images[img], true)?;
            terms.push(t.nll.expect("imitation scored"));
            let (_, u) = a.speak_turn(g, &mut s, &t, Decode::Forced(reply), &mut rng)?;
            terms.push(g.scale(u.log_prob, -1.0));
            states.push(g.value(s.h_last).to_vec());
            // The carried state is cut from the gradient; pin it so the
            // finite differences see the same function.
            if let Some(c) = carried {
                s.h_last = g.constant_vec(c[i].clone());
            }
        }
        Ok((g.add_all(&terms)?.expect("non-empty"), states))
    };
    let carried = {
        let mut g = Graph::new(&store);
        session(&mut g, None)?.1
    };
    out.push((
        "full session",
        report(&mut store, &all, |g| Ok(session(g, Some(&carried))?.0))?,
    ));
    Ok(out)
}
