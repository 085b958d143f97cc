//! Synthetic data, evaluation and training.

pub mod data;
pub mod eval;
pub mod train;

pub use data::{gen_dataset, generate_scene, load_dataset, Scene, SceneSpec};
pub use eval::{average_precision, detect, evaluate, voc07_ap, Detection, EvalReport};
pub use train::{train, TrainOutcome, Trainer};

/// `f(0..n)` spread over the available cores; results keep index order.
pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |c| c.get()).min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
