//! End-to-end checks on a few rendered scenes and a narrow denoiser.

use latent_adapter::adapter::{Adapter, AdapterSpec, ConditionKind};
use latent_adapter::checkpoint::{diff_arrays, Checkpoint};
use latent_adapter::codec::{CodecConfig, LatentCodec};
use latent_adapter::conditions::{Dataset, DatasetConfig};
use latent_adapter::denoiser::{Denoiser, DenoiserConfig, InjectionMode};
use latent_adapter::diffusion::{sample, sample_from, AdapterInput, Guidance, NoiseSchedule, SamplerConfig};
use latent_adapter::evalkit::{run_stage_ablation, EvalSet, Pipeline};
use latent_adapter::training::{train_adapter, train_base, TrainConfig};

struct Setup {
    data: Dataset,
    codec: LatentCodec,
    schedule: NoiseSchedule,
    base: Denoiser<f32>,
}

fn setup() -> Setup {
    let data = Dataset::generate(DatasetConfig { scenes: 8, seed: 4, ..DatasetConfig::default() }).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let codec = LatentCodec::new(CodecConfig::fit([&data.images(&all).unwrap()]).unwrap()).unwrap();
    let schedule = NoiseSchedule::default();
    let cfg = DenoiserConfig { base_channels: 8, ..DenoiserConfig::default() };
    let tc = TrainConfig { steps: Some(3), batch_size: 2, learning_rate: 1e-3, ..TrainConfig::base() };
    let base = train_base(&cfg, &data, &codec, &schedule, &tc).unwrap().denoiser;
    Setup { data, codec, schedule, base }
}

#[test]
fn codec_round_trip_is_exact_on_rendered_scenes() {
    let data = Dataset::generate(DatasetConfig { scenes: 5, seed: 9, ..DatasetConfig::default() }).unwrap();
    let imgs = data.images(&[0, 1, 2, 3, 4]).unwrap();
    let codec = LatentCodec::new(CodecConfig::fit([&imgs]).unwrap()).unwrap();
    let back = codec.decode(&codec.encode(&imgs).unwrap()).unwrap();
    for i in 0..5 {
        assert_eq!(back.to_rgb8(i), imgs.to_rgb8(i));
    }
}

#[test]
fn adapter_training_keeps_base_and_checkpoints_round_trip() {
    let s = setup();
    let snapshot = s.base.params().to_map();
    let spec = AdapterSpec::for_denoiser(s.base.config(), ConditionKind::Sketch, ConditionKind::Sketch.default_variant());
    let tc = TrainConfig { steps: Some(4), batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default() };
    let out = train_adapter(&s.base, spec, &s.data, &s.codec, &s.schedule, &tc, InjectionMode::default()).unwrap();
    assert!(diff_arrays(&snapshot, &s.base.params().to_map()).is_empty());
    assert!(out.base_diff.is_empty());
    assert!(!out.reached.is_empty());

    let ckpt = Checkpoint::from_bytes(&s.base.to_checkpoint(serde_json::json!({})).unwrap().to_bytes().unwrap()).unwrap();
    let base2 = Denoiser::from_checkpoint(&ckpt).unwrap();
    assert_eq!(base2.prior(), s.base.prior());
    let ackpt = Checkpoint::from_bytes(&out.adapter.to_checkpoint(serde_json::json!({})).unwrap().to_bytes().unwrap()).unwrap();
    let ad2 = Adapter::from_checkpoint(&ackpt).unwrap();

    let eval = EvalSet::from_dataset(&s.data, 2).unwrap();
    let cond = eval.condition(ConditionKind::Sketch).unwrap();
    let sc = SamplerConfig { ddim_steps: 4, ..SamplerConfig::default() };
    let a = [AdapterInput { adapter: &out.adapter, condition: &cond, weight: 1.0 }];
    let b = [AdapterInput { adapter: &ad2, condition: &cond, weight: 1.0 }];
    let za = sample(&s.base, &s.schedule, &eval.tokens, Some(Guidance::Adapters(&a)), &sc, 8).unwrap();
    let zb = sample(&base2, &s.schedule, &eval.tokens, Some(Guidance::Adapters(&b)), &sc, 8).unwrap();
    assert_eq!(za.tensor().data(), zb.tensor().data());
}

#[test]
fn sampling_a_slice_matches_the_full_batch() {
    let s = setup();
    let eval = EvalSet::from_dataset(&s.data, 4).unwrap();
    let sc = SamplerConfig { ddim_steps: 5, ..SamplerConfig::default() };
    let full = sample(&s.base, &s.schedule, &eval.tokens, None, &sc, 21).unwrap();
    let tail = sample_from(&s.base, &s.schedule, &eval.tokens[2..], None, &sc, 21, 2).unwrap();
    let per = full.tensor().len() / 4;
    assert_eq!(&full.tensor().data()[2 * per..], tail.tensor().data());
}

#[test]
fn stage_ablation_reports_every_gate() {
    let s = setup();
    let spec = AdapterSpec::for_denoiser(s.base.config(), ConditionKind::Color, ConditionKind::Color.default_variant());
    let adapter = Adapter::new(spec, 2).unwrap();
    let eval = EvalSet::from_dataset(&s.data, 3).unwrap();
    let pipe = Pipeline { denoiser: &s.base, codec: &s.codec, schedule: &s.schedule };
    let sc = SamplerConfig { ddim_steps: 3, ..SamplerConfig::default() };
    let rep = run_stage_ablation(pipe, &adapter, &eval, &sc, 1).unwrap();
    let gates: Vec<&str> = rep.results.iter().map(|r| r.gate.as_str()).collect();
    assert_eq!(gates, ["all", "stage:begin", "stage:middle", "stage:late", "none"]);
    assert!(rep.results.iter().all(|r| r.report.per_sample.len() == 3));
    assert_eq!(rep.begin_minus_late, rep.scores[1] - rep.scores[3]);
}
