//! Reference-image encoder. A strided conv trunk whose per-block outputs are
//! upsampled back to input resolution and stacked into one pixel-aligned
//! feature volume; a pooled linear head emits the global latent code. Also
//! hosts the pixel-space feature sampling that conditions the field.

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Scalar, Tape, Tensor, Var};
use crate::geometry::{
    mirror_point, project, CameraExtrinsics, CameraIntrinsics, SymmetryTransform,
};
use crate::model::{ModelConfig, ModelError};
use crate::params::{uniform_fan_in, BoundParams, ParamSet};

pub fn init_params<T: Scalar>(
    params: &mut ParamSet<T>,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) {
    let mut cin = 3;
    for (i, &cout) in cfg.encoder_channels.iter().enumerate() {
        let fan_in = 4 * 4 * cin;
        params.insert(
            format!("enc.block{i}.kernel"),
            uniform_fan_in::<T>(&[4, 4, cin, cout], fan_in, rng),
        );
        params.insert(format!("enc.block{i}.bias"), uniform_fan_in::<T>(&[cout], fan_in, rng));
        cin = cout;
    }
    let c_last = cfg.encoder_channels[3];
    params.insert(
        "enc.latent.weight",
        uniform_fan_in::<T>(&[c_last, cfg.latent_dim], c_last, rng),
    );
    params.insert("enc.latent.bias", uniform_fan_in::<T>(&[cfg.latent_dim], c_last, rng));
}

/// One reference view after encoding: latent is [1, k], features is
/// [size, size, n] with n the summed block channels.
#[derive(Clone, Copy, Debug)]
pub struct EncodedView {
    pub latent: Var,
    pub features: Var,
}

/// image must be [size, size, 3] in [0, 1].
pub fn encode<T: Scalar>(
    tape: &Tape<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<EncodedView, ModelError> {
    let s = cfg.image_size;
    let sh = image.shape();
    if sh != [s, s, 3] {
        let get = |i: usize| sh.get(i).copied().unwrap_or(0);
        return Err(ModelError::ImageSize { got_h: get(0), got_w: get(1), got_c: get(2), want: s });
    }
    let mut x = tape.constant(image.clone());
    let mut blocks = Vec::with_capacity(cfg.encoder_channels.len());
    for i in 0..cfg.encoder_channels.len() {
        let kernel = params.var(&format!("enc.block{i}.kernel"));
        let bias = params.var(&format!("enc.block{i}.bias"));
        x = tape.softplus(tape.conv2d_stride2(x, kernel, bias));
        blocks.push(x);
    }
    let columns: Vec<Var> = blocks
        .iter()
        .zip(cfg.encoder_channels)
        .map(|(&b, c)| tape.reshape(tape.upsample_bilinear(b, s, s), &[s * s, c]))
        .collect();
    let features = tape.reshape(tape.concat_cols(&columns), &[s, s, cfg.feature_channels()]);
    let pooled = tape.avg_pool_global(*blocks.last().unwrap());
    let latent =
        tape.add_row(tape.matmul(pooled, params.var("enc.latent.weight")), params.var("enc.latent.bias"));
    Ok(EncodedView { latent, features })
}

/// Bilinear read of an [H, W, C] grid at pixel coordinates (u along columns,
/// v along rows, integer coordinates at cell centers). Cells outside the grid
/// contribute zero. Deliberately independent of the tape's sampling op so the
/// two can check each other.
pub fn sample_feature(grid: &Tensor<f64>, uv: [f64; 2]) -> Vec<f64> {
    let (h, w, c) = grid.dims3();
    let x0 = uv[0].floor();
    let y0 = uv[1].floor();
    let fx = uv[0] - x0;
    let fy = uv[1] - y0;
    let mut out = vec![0.0; c];
    for (x, y, wt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ] {
        if x < 0.0 || y < 0.0 || x as usize >= w || y as usize >= h || wt == 0.0 {
            continue;
        }
        let cell = &grid.data()[((y as usize) * w + x as usize) * c..][..c];
        for (o, &g) in out.iter_mut().zip(cell) {
            *o += wt * g;
        }
    }
    out
}

/// Features at a world point's reprojection and at its mirror's reprojection.
/// A point behind the camera reads zero, same as one projecting off-image.
pub fn extract_point_features(
    grid: &Tensor<f64>,
    x: &Vector3<f64>,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    sym: &SymmetryTransform,
) -> (Vec<f64>, Vec<f64>) {
    let c = grid.dims3().2;
    let read = |p: &Vector3<f64>| match project(p, intr, extr) {
        Ok(hit) => sample_feature(grid, hit.uv),
        Err(_) => vec![0.0; c],
    };
    (read(x), read(&mirror_point(x, sym)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::test_support::{random_camera, random_symmetry};
    use crate::model::Model;
    use rand::{Rng, SeedableRng};

    fn small_config() -> ModelConfig {
        ModelConfig { image_size: 16, ..ModelConfig::default() }
    }

    fn random_image(size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[size, size, 3], data)
    }

    fn flip_h(t: &Tensor<f64>) -> Tensor<f64> {
        let (h, w, c) = t.dims3();
        let mut out = Tensor::zeros(&[h, w, c]);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.data_mut()[(y * w + x) * c + ch] = t.data()[(y * w + (w - 1 - x)) * c + ch];
                }
            }
        }
        out
    }

    #[test]
    fn encode_shapes_and_parameter_count() {
        let cfg = small_config();
        let model: Model<f64> = Model::init(cfg, 4).unwrap();
        // 4*4*3*8+8, 4*4*8*16+16, 4*4*16*16+16, 4*4*16*24+24, 24*128+128
        let encoder_values: usize = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("enc."))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(encoder_values, 392 + 2064 + 4112 + 6168 + 3200);

        let tape: Tape<f64> = Tape::new();
        let bound = BoundParams::bind_const(&tape, &model.params);
        let enc = encode(&tape, &bound, &cfg, &random_image(16, 0)).unwrap();
        assert_eq!(tape.shape(enc.latent), vec![1, 128]);
        assert_eq!(tape.shape(enc.features), vec![16, 16, 64]);
    }

    #[test]
    fn encode_is_deterministic_and_finite_on_a_zero_image() {
        let cfg = small_config();
        let model: Model<f64> = Model::init(cfg, 11).unwrap();
        let image = random_image(16, 1);
        let run = |img: &Tensor<f64>| {
            let tape: Tape<f64> = Tape::new();
            let bound = BoundParams::bind_const(&tape, &model.params);
            let enc = encode(&tape, &bound, &cfg, img).unwrap();
            (tape.value(enc.latent).data().to_vec(), tape.value(enc.features).data().to_vec())
        };
        let (z1, f1) = run(&image);
        let (z2, f2) = run(&image);
        assert_eq!(z1, z2);
        assert_eq!(f1, f2);

        let (z0, f0) = run(&Tensor::zeros(&[16, 16, 3]));
        assert!(z0.iter().chain(&f0).all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_image_size_is_an_argument_error() {
        let cfg = small_config();
        let model: Model<f64> = Model::init(cfg, 0).unwrap();
        let tape: Tape<f64> = Tape::new();
        let bound = BoundParams::bind_const(&tape, &model.params);
        let bad = Tensor::zeros(&[8, 8, 3]);
        assert!(matches!(
            encode(&tape, &bound, &cfg, &bad),
            Err(ModelError::ImageSize { got_h: 8, want: 16, .. })
        ));
    }

    #[test]
    fn mirror_symmetric_kernels_make_features_flip_equivariant() {
        let cfg = small_config();
        let mut model: Model<f64> = Model::init(cfg, 23).unwrap();
        // The window geometry (4x4, stride 2, pad 1) is flip-symmetric, so
        // equivariance holds exactly when each kernel equals its own mirror.
        for i in 0..4 {
            let k = model.params.get_mut(&format!("enc.block{i}.kernel"));
            let &[_, _, cin, cout] = k.shape() else { panic!() };
            let data = k.data_mut();
            for ky in 0..4 {
                for kx in 0..2 {
                    for ci in 0..cin {
                        for co in 0..cout {
                            let a = ((ky * 4 + kx) * cin + ci) * cout + co;
                            let b = ((ky * 4 + (3 - kx)) * cin + ci) * cout + co;
                            let mean = 0.5 * (data[a] + data[b]);
                            data[a] = mean;
                            data[b] = mean;
                        }
                    }
                }
            }
        }
        let image = random_image(16, 5);
        let run = |img: &Tensor<f64>| {
            let tape: Tape<f64> = Tape::new();
            let bound = BoundParams::bind_const(&tape, &model.params);
            let enc = encode(&tape, &bound, &cfg, img).unwrap();
            (
                tape.value(enc.latent).data().to_vec(),
                tape.value(enc.features).as_ref().clone(),
            )
        };
        let (z, f) = run(&image);
        let (z_flip, f_flip) = run(&flip_h(&image));
        let want = flip_h(&f);
        for (a, b) in f_flip.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5, "feature volume must flip with the image: {a} vs {b}");
        }
        // the pooled latent ignores orientation entirely
        for (a, b) in z_flip.iter().zip(&z) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn sampling_identities_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = Tensor::from_vec(
            &[4, 5, 3],
            (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        // exact stored value at integer centers
        for (x, y) in [(0usize, 0usize), (4, 3), (2, 1)] {
            let got = sample_feature(&grid, [x as f64, y as f64]);
            assert_eq!(got, grid.data()[(y * 5 + x) * 3..][..3].to_vec());
        }
        // midpoint of two horizontal neighbours averages them
        let got = sample_feature(&grid, [1.5, 2.0]);
        for ch in 0..3 {
            let a = grid.data()[(2 * 5 + 1) * 3 + ch];
            let b = grid.data()[(2 * 5 + 2) * 3 + ch];
            assert_eq!(got[ch], (a + b) / 2.0);
        }
        // far outside reads zero
        assert_eq!(sample_feature(&grid, [-3.0, 1.0]), vec![0.0; 3]);
        assert_eq!(sample_feature(&grid, [1.0, 40.0]), vec![0.0; 3]);
    }

    #[test]
    fn sampling_is_continuous_along_a_transect() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let grid = Tensor::from_vec(
            &[6, 6, 2],
            (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        let peak = grid.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // bilinear slope along one axis is bounded by the largest neighbour
        // gap, itself at most 2*peak (zero border included)
        let lipschitz = 2.0 * peak * 2.0f64.sqrt();
        let step = 1e-3;
        // diagonal transect entering and leaving the grid
        let mut prev = sample_feature(&grid, [-1.5, -1.0]);
        let mut t = step;
        while t < 9.0 {
            let cur = sample_feature(&grid, [-1.5 + t, -1.0 + t]);
            for (a, b) in cur.iter().zip(&prev) {
                assert!((a - b).abs() <= lipschitz * step + 1e-9, "jump at t={t}: {a} vs {b}");
            }
            prev = cur;
            t += step;
        }
    }

    #[test]
    fn tape_sampling_matches_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let grid = Tensor::from_vec(
            &[7, 5, 4],
            (0..140).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        let coords: Vec<[f64; 2]> =
            (0..200).map(|_| [rng.gen_range(-2.0..7.0), rng.gen_range(-2.0..9.0)]).collect();
        let tape: Tape<f64> = Tape::new();
        let g = tape.constant(grid.clone());
        let sampled = tape.bilinear_sample(g, std::rc::Rc::new(coords.clone()));
        let got = tape.value(sampled);
        for (i, &uv) in coords.iter().enumerate() {
            let want = sample_feature(&grid, uv);
            for ch in 0..4 {
                assert!((got.data()[i * 4 + ch] - want[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn plane_points_see_equal_local_and_symmetric_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (intr, extr) = random_camera(&mut rng);
        let sym = SymmetryTransform::canonical();
        let grid = Tensor::from_vec(
            &[8, 8, 2],
            (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        for _ in 0..50 {
            let x = Vector3::new(0.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let (local, symmetric) = extract_point_features(&grid, &x, &intr, &extr, &sym);
            assert_eq!(local, symmetric);
        }
    }

    #[test]
    fn mirrored_points_swap_their_feature_pair_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (intr, extr) = random_camera(&mut rng);
        let sym = SymmetryTransform::canonical();
        let grid = Tensor::from_vec(
            &[10, 10, 3],
            (0..300).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        for _ in 0..1000 {
            let x = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let (a, b) = extract_point_features(&grid, &x, &intr, &extr, &sym);
            let (c, d) = extract_point_features(&grid, &mirror_point(&x, &sym), &intr, &extr, &sym);
            assert_eq!((a, b), (d, c), "swap must be exact at {x:?}");
        }
    }

    #[test]
    fn general_plane_swap_is_exact_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let sym = random_symmetry(&mut rng);
            let (intr, extr) = random_camera(&mut rng);
            let grid = Tensor::from_vec(
                &[6, 6, 2],
                (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            );
            for _ in 0..50 {
                let x = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let (a, b) = extract_point_features(&grid, &x, &intr, &extr, &sym);
                let (c, d) =
                    extract_point_features(&grid, &mirror_point(&x, &sym), &intr, &extr, &sym);
                for (p, q) in a.iter().zip(&d).chain(b.iter().zip(&c)) {
                    assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn extraction_composes_projection_and_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (intr, extr) = random_camera(&mut rng);
        let sym = SymmetryTransform::canonical();
        let grid = Tensor::from_vec(
            &[12, 12, 5],
            (0..720).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        let mut checked = 0;
        for _ in 0..400 {
            let x = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
            let (local, symmetric) = extract_point_features(&grid, &x, &intr, &extr, &sym);
            if let Ok(p) = project(&x, &intr, &extr) {
                assert_eq!(local, sample_feature(&grid, p.uv));
                checked += 1;
            } else {
                assert_eq!(local, vec![0.0; 5]);
            }
            if let Ok(p) = project(&mirror_point(&x, &sym), &intr, &extr) {
                assert_eq!(symmetric, sample_feature(&grid, p.uv));
            } else {
                assert_eq!(symmetric, vec![0.0; 5]);
            }
        }
        assert!(checked > 100, "camera draw left too few visible points");
    }
}
