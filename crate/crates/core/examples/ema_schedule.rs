//! Trace the dual-teacher schedule on a single scalar weight: the dynamic
//! teacher moves every `n_update` iterations, the static one once per epoch.
//!
//!     cargo run --example ema_schedule -- [iterations_per_epoch] [epochs]

use dladapt::detector::{ModelParameters, Tensor};
use dladapt::ema::{DualTeacherState, TeacherSchedule};

fn scalar(v: f64) -> ModelParameters {
    ModelParameters::new([("w".to_string(), Tensor::scalar(v))].into_iter().collect()).unwrap()
}

fn main() -> dladapt::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let (iters, epochs) = (args.first().copied().unwrap_or(40), args.get(1).copied().unwrap_or(3));
    let schedule = TeacherSchedule::default();
    let n_update = schedule.update_interval(iters);
    let mut state = DualTeacherState::new(&scalar(0.0));
    println!("n_update={n_update}; student weight ramps 0 -> 1");
    let total = iters * epochs;
    for k in 1..=total {
        state.student_params = scalar(k as f64 / total as f64);
        let ev = state.tick(&schedule, n_update, k % iters == 0)?;
        if ev.dynamic_updated || ev.static_updated {
            println!(
                "iter {k:>4}  student {:.3}  dynamic {:.5}{}  static {:.5}{}",
                state.student_params.get("w").data[0],
                state.dynamic_params.get("w").data[0],
                if ev.dynamic_updated { "*" } else { " " },
                state.static_params.get("w").data[0],
                if ev.static_updated { "*" } else { " " },
            );
        }
    }
    Ok(())
}
