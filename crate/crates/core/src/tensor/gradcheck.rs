use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Scalar, Tape, Var};

/// Outcome of a finite-difference check over a parameter store.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central finite differences
/// `(f(p+h) - f(p-h)) / 2h` on a sampled subset of at least
/// `coords_per_param` coordinates per parameter tensor.
///
/// `build` must construct the scalar loss from the bound parameter vars; it
/// is re-evaluated at perturbed parameters, so it has to be a pure function
/// of the store contents.
pub fn grad_check<F, B>(
    store: &mut ParamStore<F>,
    build: B,
    step: F,
    coords_per_param: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Scalar,
    B: Fn(&mut Tape<F>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound);
    let grads = tape.backward(loss).expect("grad_check loss must be scalar");

    let eval = |store: &ParamStore<F>| -> F {
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let l = build(&mut t, &b);
        t.value(l).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };

    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let k = coords_per_param.min(n);
        let picks: Vec<usize> = if k == n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, k).into_vec()
        };
        let analytic = grads.get(bound[id.0]).cloned();
        for c in picks {
            let a = analytic
                .as_ref()
                .map(|g| g.data()[c].to_f64())
                .unwrap_or(0.0);
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + step;
            let fp = eval(store).to_f64();
            store.get_mut(id).data_mut()[c] = orig - step;
            let fm = eval(store).to_f64();
            store.get_mut(id).data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * step.to_f64());
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{}]", store.name(id), c);
            }
            report.coords_checked += 1;
        }
    }
    report
}

/// Relative error with an absolute floor so near-zero gradient pairs do not
/// blow up the ratio.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / scale
}
