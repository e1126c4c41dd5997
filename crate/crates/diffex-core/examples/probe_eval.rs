// scratch probe: reconstruction metrics for a snapshot at several DDIM
// stride counts (removed before ship)
use diffex_core::pipeline::*;
use diffex_core::ranking::PipelineModels;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = std::path::PathBuf::from(&args[1]);
    let ckpt = std::path::PathBuf::from(&args[2]);
    let n_images: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);
    let paths = ArtifactPaths::new(&root);
    let split = diffex_core::datagen::load_dataset(&paths.data_dir).unwrap();
    let (clf, _) = load_classifier(&paths.classifier_ckpt, None).unwrap();
    let (enc, den, sched, _) = load_sdae(&ckpt, None).unwrap();
    let imgs: Vec<_> = split
        .test
        .iter()
        .take(n_images)
        .map(|im| im.pixels.clone())
        .collect();
    for n_steps in [10usize, 20, 40, 60] {
        let models = PipelineModels {
            encoder: &enc,
            denoiser: &den,
            classifier: &clf,
            schedule: &sched,
            n_steps,
        };
        let t0 = std::time::Instant::now();
        let m = diffex_core::explain::reconstruction_metrics(&imgs, &models).unwrap();
        println!(
            "n_steps {n_steps}: ssim {:.4} mse {:.5} agreement {:.3} ({:.0}s)",
            m.ssim,
            m.mse,
            m.agreement,
            t0.elapsed().as_secs_f64()
        );
    }
}
