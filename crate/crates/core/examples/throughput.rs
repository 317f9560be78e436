//! Times one training step and one sampling step of the default denoiser.

use std::time::Instant;

use latent_adapter::denoiser::{Denoiser, DenoiserConfig, StepInput};
use latent_adapter::diffusion::NoiseSchedule;
use latent_adapter::graph::Graph;
use latent_adapter::tensor::Tensor;

fn main() -> latent_adapter::Result<()> {
    let cfg = DenoiserConfig::default();
    let d = Denoiser::<f32>::new(cfg.clone(), 0)?;
    println!("denoiser parameters: {}", cfg.param_count());
    for &(batch, train) in &[(8usize, true), (64, false)] {
        let reps = 5;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut g = Graph::new();
            let p = d.params().bind(&mut g, train);
            let z = g.leaf(Tensor::full([cfg.latent_channels, batch, 16, 16], 0.1), false);
            let time = StepInput::new(&vec![500; batch], &NoiseSchedule::default());
            let tokens = vec![3; batch * cfg.max_tokens];
            let out = d.forward(&mut g, &p, z, &time, &tokens, None)?;
            if train {
                let target = g.leaf(Tensor::zeros(g.shape(out.eps)), false);
                let loss = g.mse(out.eps, target)?;
                g.backward(loss)?;
            }
        }
        let per = t0.elapsed().as_secs_f64() / reps as f64;
        println!("batch {batch} {}: {:.1} ms", if train { "train step" } else { "forward" }, per * 1e3);
    }
    Ok(())
}
