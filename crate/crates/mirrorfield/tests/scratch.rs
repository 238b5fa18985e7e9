use mirrorfield::checkpoint::load_checkpoint;
use mirrorfield::geometry::camera_ray;
use mirrorfield::renderer::{render_rays, ReferenceView, RenderConfig};
use mirrorfield::synthdata::load_dataset;
use mirrorfield::trainer::{loss, sample_batch, TrainConfig};
use std::path::Path;

#[test]
fn inspect_collapse() {
    let ck = load_checkpoint::<f32>(Path::new("/root/probe/ck2000.bin")).unwrap();
    let data = load_dataset(Path::new("/root/probe/data1")).unwrap();
    let scene = &data.scenes[0];
    let reference = ReferenceView::from_scene(scene, 0).unwrap();
    let view = &scene.views[0];

    // Center-pixel ray of the reference view, black background: an empty
    // field must come out (0,0,0), a solid one something else.
    let cfg = RenderConfig { background: [0.0, 0.0, 0.0], ..RenderConfig::default() };
    let ray = camera_ray([32.0, 32.0], &view.intrinsics, &view.extrinsics);
    let px = render_rays(&ck.model, &reference, &[ray], &cfg, 0).unwrap();
    println!("center pixel over black: {:?}", px[0]);

    // What would an all-white prediction score on a training batch?
    let train_cfg = TrainConfig {
        objects_per_batch: 1,
        rays_per_object: 256,
        samples_per_ray: 64,
        seed: 7,
        ..TrainConfig::default()
    };
    for step in [1900u64, 1950, 1999] {
        let batch = sample_batch(&data, &train_cfg, step).unwrap();
        let white = vec![[1.0, 1.0, 1.0]; batch.objects[0].targets.len()];
        let l = loss(&white, &batch.objects[0].targets).unwrap();
        println!("step {step}: all-white loss on its batch = {l:.3}");
    }
}
