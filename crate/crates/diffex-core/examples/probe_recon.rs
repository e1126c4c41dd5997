// scratch probe: reconstruct a few test images from an artifact dir and
// print per-image stats (removed before ship)
use diffex_core::config::parse_config;
use diffex_core::pipeline::*;
use diffex_core::ranking::PipelineModels;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let root = std::path::PathBuf::from(&args[1]);
    let cfg = parse_config(&root.join("config.used.toml")).unwrap();
    let paths = ArtifactPaths::new(&root);
    let split = diffex_core::datagen::load_dataset(&paths.data_dir).unwrap();
    let (clf, _) = load_classifier(&paths.classifier_ckpt, None).unwrap();
    let (enc, den, sched, _) = load_sdae(&paths.sdae_ckpt, None).unwrap();
    let models = PipelineModels { encoder: &enc, denoiser: &den, classifier: &clf, schedule: &sched, n_steps: cfg.sdae.n_steps };
    for im in split.test.iter().take(8) {
        let recon = diffex_core::semantic_ae::reconstruct(&im.pixels, &enc, &den, &clf, &sched, models.n_steps).unwrap();
        let m = diffex_core::explain::mse(&im.pixels, &recon).unwrap();
        let s = diffex_core::explain::ssim(&im.pixels, &recon).unwrap();
        let po = clf.probs_unchecked(&im.pixels);
        let pr = clf.probs_unchecked(&recon);
        let cyto_o = diffex_core::datagen::cytoplasm_mean(&im.pixels);
        let cyto_r = diffex_core::datagen::cytoplasm_mean(&recon);
        println!("id {:3} label {} mse {:.4} ssim {:.3} p1(x) {:.3} p1(recon) {:.3} cyto {:.3}->{:.3}",
            im.id, im.label, m, s, po[1], pr[1], cyto_o, cyto_r);
    }
}
