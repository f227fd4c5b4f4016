//! Central finite-difference oracle for the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Coordinates probed per parameter tensor; every coordinate when the tensor is smaller.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            coords_per_param: 12,
            seed: 0,
        }
    }
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &BoundParams<'g>) -> Result<Var>,
{
    let mut graph = Graph::new();
    let bound = store.bind(&mut graph);
    let loss = f(&mut graph, &bound)?;
    graph.value(loss).item()
}

/// Max relative error `|analytic − cd| / max(|analytic|, |cd|, floor)` over the
/// sampled coordinates of every parameter in `store`, where
/// `floor = 1e-10 / h · max(1, |loss|)`. A central difference carries round-off of
/// about `1e-14 · |loss| / h`, so coordinates below the floor are held to an
/// absolute error well under their own size; gradients that are structurally zero
/// (a key bias under softmax) sit there.
pub fn grad_check_store<F>(f: F, store: &ParamStore, config: &GradCheckConfig) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &BoundParams<'g>) -> Result<Var>,
{
    let analytic: Vec<Option<Tensor>> = {
        let mut graph = Graph::new();
        let bound = store.bind(&mut graph);
        let loss = f(&mut graph, &bound)?;
        let mut grads = graph.backward(loss)?;
        bound.vars().iter().map(|&v| grads.take(v)).collect()
    };
    let floor = 1e-10 / config.h * evaluate(&f, store)?.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let len = store.tensors()[pi].len();
        let coords: Vec<usize> = if len <= config.coords_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, config.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let original = store.tensors()[pi].data()[c];
            probe.tensors_mut()[pi].data_mut()[c] = original + config.h;
            let plus = evaluate(&f, &probe)?;
            probe.tensors_mut()[pi].data_mut()[c] = original - config.h;
            let minus = evaluate(&f, &probe)?;
            probe.tensors_mut()[pi].data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * config.h);
            let exact = grad.as_ref().map_or(0.0, |g| g.data()[c]);
            let denom = exact.abs().max(numeric.abs()).max(floor);
            let err = (exact - numeric).abs() / denom;
            if !err.is_finite() {
                return Err(Error::Numeric("grad_check".into()));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// [`grad_check_store`] for positional parameters.
pub fn grad_check<F>(f: F, params: &[Tensor], config: &GradCheckConfig) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, p) in params.iter().enumerate() {
        store.insert(format!("p{i}"), p.clone())?;
    }
    grad_check_store(
        |g: &mut Graph<'_>, bound: &BoundParams<'_>| f(g, bound.vars()),
        &store,
        config,
    )
}
