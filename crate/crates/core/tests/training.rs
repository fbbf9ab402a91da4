use nvc::io::patches::PatchSource;
use nvc::io::ModelCheckpoint;
use nvc::synth;
use nvc::training::{evaluate_checkpoint, initial_model, train, StepTelemetry, TrainConfig};

fn window_mean(t: &[StepTelemetry], f: impl Fn(&StepTelemetry) -> f64) -> f64 {
    t.iter().map(f).sum::<f64>() / t.len() as f64
}

#[test]
fn two_thousand_steps_reduce_distortion_and_rate() {
    let data = PatchSource::from_images(synth::corpus(11, 20, 64, 64), 32).unwrap();
    let config = TrainConfig {
        latent_channels: 32,
        hidden_channels: 64,
        patch_size: 32,
        batch_size: 8,
        steps: 2000,
        ..TrainConfig::default()
    };
    let out = train(&config, &data).unwrap();
    let (head, tail) = (&out.telemetry[..50], &out.telemetry[1950..]);
    let mse = |t: &StepTelemetry| t.mse;
    let rate = |t: &StepTelemetry| t.rate_bpp;
    assert!(window_mean(tail, mse) < window_mean(head, mse));
    assert!(window_mean(tail, rate) < window_mean(head, rate));

    let held_out = synth::corpus(12, 4, 64, 64);
    let trained = evaluate_checkpoint(&out.checkpoint, &held_out).unwrap();
    let untrained = ModelCheckpoint::new(initial_model(&config).unwrap(), Default::default());
    let untrained = evaluate_checkpoint(&untrained, &held_out).unwrap();
    assert!(trained.ssim > untrained.ssim, "{trained:?} vs {untrained:?}");
    assert!(trained.mse < untrained.mse);
    assert!(trained.bpp < untrained.bpp);
}

#[test]
fn checkpoint_survives_disk_round_trip() {
    let data = PatchSource::from_images(synth::corpus(0, 4, 32, 32), 16).unwrap();
    let config = TrainConfig {
        latent_channels: 4,
        hidden_channels: 8,
        patch_size: 16,
        batch_size: 2,
        steps: 3,
        ..TrainConfig::default()
    };
    let ck = train(&config, &data).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = ModelCheckpoint::load(&path).unwrap();
    assert_eq!(back.model_id(), ck.model_id());
    assert_eq!(back.metadata, ck.metadata);
    let eval = synth::corpus(1, 2, 16, 16);
    assert_eq!(evaluate_checkpoint(&back, &eval).unwrap(), evaluate_checkpoint(&ck, &eval).unwrap());
}
