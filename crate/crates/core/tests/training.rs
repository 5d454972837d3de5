use rayon::ThreadPoolBuilder;
use starvqa::dataset::{load_all, Manifest, Video};
use starvqa::synthetic::{overfit_config, SyntheticSpec};
use starvqa::train::{fit, EpochRecord, TrainState};

fn videos(dir: &std::path::Path) -> Vec<Video> {
    let m = SyntheticSpec::default().write(dir).unwrap();
    load_all(&Manifest::load(&m).unwrap(), overfit_config().encoder.frames).unwrap()
}

fn run(videos: &[Video], threads: usize) -> (TrainState<f32>, Vec<EpochRecord>) {
    let cfg = overfit_config();
    let pool = ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let mut seen = Vec::new();
    let state = pool.install(|| fit(cfg.encoder, &cfg.train, videos, |r| seen.push(r.clone()))).unwrap();
    (state, seen)
}

fn moving_average(losses: &[f64], width: usize) -> Vec<f64> {
    losses.windows(width).map(|w| w.iter().sum::<f64>() / width as f64).collect()
}

#[test]
fn synthetic_set_is_memorized() {
    let dir = tempfile::tempdir().unwrap();
    let videos = videos(dir.path());
    let (state, seen) = run(&videos, 4);
    assert_eq!(state.history, seen);
    assert_eq!(seen.len(), 500);
    assert!(seen.iter().all(|r| r.step == r.epoch as u64));
    let hit = seen.iter().find(|r| r.srocc == Some(1.0) && r.loss < 0.01).expect("target reached");
    assert!(hit.step <= 500);

    // After the target is first met, the 50-step moving average never rises.
    let losses: Vec<f64> = seen.iter().map(|r| r.loss).collect();
    let ma = moving_average(&losses, 50);
    for i in 1..ma.len() {
        if i as u64 + 1 > hit.step {
            assert!(ma[i] <= ma[i - 1], "window starting at step {} rose: {} -> {}", i + 1, ma[i - 1], ma[i]);
        }
    }
    let last = seen.last().unwrap();
    assert!(last.loss < hit.loss && last.srocc == Some(1.0));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let videos = videos(dir.path());
    let (one, log_one) = run(&videos, 1);
    let (four, log_four) = run(&videos, 4);
    assert_eq!(log_one, log_four);
    assert_eq!(one, four);
}
