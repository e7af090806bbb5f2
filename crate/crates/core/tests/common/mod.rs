#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spgl::data::Session;
use spgl::graph::GlobalGraph;
use spgl::tensor::{CsrMatrix, Tape, Tensor, Var};
use spgl::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn random_sessions(rng: &mut ChaCha8Rng, n: usize, max_total: usize) -> Vec<Session> {
    let mut out = Vec::new();
    let mut total = 0;
    while total < max_total {
        let len = rng.random_range(1..=8).min(max_total - total);
        out.push(Session {
            items: (0..len).map(|_| rng.random_range(0..n)).collect(),
            start_time: out.len() as i64,
        });
        total += len;
        if rng.random::<f64>() < 0.05 {
            break;
        }
    }
    out
}

/// Pair-enumeration oracle in exact arithmetic: every weight `1/(1+h)` with
/// `h <= 5` is an integer multiple of 1/60.
pub const ORACLE_DENOM: u64 = 60;

pub fn oracle_graph(sessions: &[Session], epsilon: usize) -> BTreeMap<(usize, usize), u64> {
    assert!(epsilon <= 5);
    let mut w = BTreeMap::new();
    for s in sessions {
        for i in 0..s.items.len() {
            for j in 0..s.items.len() {
                if j > i && j - i <= epsilon {
                    *w.entry((s.items[i], s.items[j])).or_insert(0) +=
                        ORACLE_DENOM / (1 + (j - i) as u64);
                }
            }
        }
    }
    w
}

/// Empty string on agreement, else a description of the first difference.
pub fn compare_with_oracle(graph: &GlobalGraph, oracle: &BTreeMap<(usize, usize), u64>) -> String {
    if graph.edge_count() != oracle.len() {
        return format!("edge count {} vs oracle {}", graph.edge_count(), oracle.len());
    }
    for (e, (&(src, dst), &q)) in graph.edges().iter().zip(oracle) {
        let expected = q as f64 / ORACLE_DENOM as f64;
        if (e.src, e.dst) != (src, dst) || (e.weight - expected).abs() > 1e-12 * expected.max(1.0) {
            return format!(
                "edge ({},{}) = {} vs oracle ({src},{dst}) = {expected}",
                e.src, e.dst, e.weight
            );
        }
    }
    String::new()
}

type Closure = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub f: Closure,
}

/// Reduces `v` to a scalar through a fixed random weighting so that every
/// output entry carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.mul_const(v, weights)?;
    Ok(tape.sum(w))
}

fn case(
    name: &'static str,
    params: Vec<Tensor>,
    out_shape: (usize, usize),
    seed: u64,
    body: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> PrimitiveCase {
    let weights = random_tensor(&mut rng(seed ^ 0xABCD), out_shape.0, out_shape.1, 1.0);
    PrimitiveCase {
        name,
        params,
        f: Box::new(move |tape, vars| {
            let out = body(tape, vars)?;
            weighted_sum(tape, out, &weights)
        }),
    }
}

fn random_sparse(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CsrMatrix {
    let mut triplets = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.random::<f64>() < 0.4 {
                triplets.push((r, c, rng.random_range(-1.0..1.0)));
            }
        }
    }
    CsrMatrix::from_sorted_triplets(rows, cols, triplets)
}

/// One case per tape primitive, on random inputs.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut r = rng(seed);
    let a34 = random_tensor(&mut r, 3, 4, 1.0);
    let b45 = random_tensor(&mut r, 4, 5, 1.0);
    let c34 = random_tensor(&mut r, 3, 4, 1.0);
    let bias = random_tensor(&mut r, 1, 4, 1.0);
    let col = random_tensor(&mut r, 3, 1, 1.0);
    let konst = random_tensor(&mut r, 3, 4, 1.0);
    let positive = Tensor::from_vec(3, 4, (0..12).map(|_| r.random_range(0.2..2.0)).collect()).unwrap();
    let sparse = Arc::new(random_sparse(&mut r, 5, 3));
    let rows52 = random_tensor(&mut r, 5, 2, 1.0);
    let wide = random_tensor(&mut r, 3, 2, 1.0);
    let table = random_tensor(&mut r, 4, 3, 1.0);
    // clamp bounds sit away from every entry so the kink is never probed
    let mut clampable = random_tensor(&mut r, 3, 4, 1.0);
    for v in clampable.data_mut() {
        if v.abs() > 0.45 && v.abs() < 0.55 {
            *v *= 0.5;
        }
    }
    let gather_idx = vec![2, 0, 2, 3];
    let offsets = vec![0, 1, 4, 5];

    vec![
        case("matmul", vec![a34.clone(), b45], (3, 5), 1, |t, v| t.matmul(v[0], v[1])),
        case("sparse_matmul", vec![wide.clone()], (5, 2), 2, move |t, v| {
            t.sparse_matmul(sparse.clone(), v[0])
        }),
        case("add", vec![a34.clone(), c34.clone()], (3, 4), 3, |t, v| t.add(v[0], v[1])),
        case("add_bias", vec![a34.clone(), bias], (3, 4), 4, |t, v| t.add_bias(v[0], v[1])),
        case("mul_rows", vec![a34.clone(), col], (3, 4), 5, |t, v| t.mul_rows(v[0], v[1])),
        case("mul_const", vec![a34.clone()], (3, 4), 6, move |t, v| t.mul_const(v[0], &konst)),
        case("affine", vec![a34.clone()], (3, 4), 7, |t, v| Ok(t.affine(v[0], -1.5, 0.25))),
        case("scale", vec![a34.clone()], (3, 4), 8, |t, v| Ok(t.scale(v[0], 2.5))),
        case("tanh", vec![a34.clone()], (3, 4), 9, |t, v| Ok(t.tanh(v[0]))),
        case("sigmoid", vec![a34.clone()], (3, 4), 10, |t, v| Ok(t.sigmoid(v[0]))),
        case("log", vec![positive], (3, 4), 11, |t, v| Ok(t.log(v[0]))),
        case("clamp", vec![clampable], (3, 4), 12, |t, v| Ok(t.clamp(v[0], -0.5, 0.5))),
        case("row_softmax", vec![a34.clone()], (3, 4), 13, |t, v| Ok(t.row_softmax(v[0]))),
        case("row_log_softmax", vec![a34.clone()], (3, 4), 14, |t, v| Ok(t.row_log_softmax(v[0]))),
        case("row_log_sum_exp", vec![a34.clone()], (3, 1), 15, |t, v| Ok(t.row_log_sum_exp(v[0]))),
        case("transpose", vec![a34.clone()], (4, 3), 16, |t, v| Ok(t.transpose(v[0]))),
        case("concat_cols", vec![a34.clone(), wide], (3, 6), 17, |t, v| t.concat_cols(v[0], v[1])),
        case("mean_rows", vec![c34], (1, 4), 18, |t, v| t.mean_rows(v[0])),
        case("sum", vec![a34.clone()], (1, 1), 19, |t, v| Ok(t.sum(v[0]))),
        case("gather_rows", vec![table], (4, 3), 20, move |t, v| t.gather_rows(v[0], &gather_idx)),
        case("segment_mean", vec![rows52.clone()], (3, 2), 21, move |t, v| t.segment_mean(v[0], &offsets)),
        case("cosine_similarity_matrix", vec![rows52], (5, 5), 22, |t, v| t.cosine_similarity_matrix(v[0])),
    ]
}
