mod common;

use proptest::prelude::*;
use pst_core::model::PhotoSample;
use pst_core::synthdata::{
    decode_sample, encode_sample, extract_patches, generate_dataset, load_dataset, read_manifest,
    render_sample, sample_lights, write_normal_png, GenConfig, SceneSpec, SurfaceKind,
};
use pst_core::ParseError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn light_elevation_is_uniform_on_the_hemisphere() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lights = sample_lights(100_000, 0.0, &mut rng).unwrap();
    let mean_z = lights.iter().map(|l| l[2] as f64).sum::<f64>() / lights.len() as f64;
    assert!((mean_z - 0.5).abs() < 0.01, "{mean_z}");
    let mean_x = lights.iter().map(|l| l[0] as f64).sum::<f64>() / lights.len() as f64;
    assert!(mean_x.abs() < 0.01, "{mean_x}");
}

#[test]
fn renderer_matches_shading_formula() {
    let lights = sample_lights(6, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for kind in [SurfaceKind::Sphere, SurfaceKind::Blob] {
        let spec = SceneSpec {
            kind,
            height: 12,
            width: 14,
            channels: 2,
            albedo: None,
            specular: 0.4,
            shininess: 20.0,
            noise: 0.0,
            seed: 8,
        };
        let s = render_sample(&spec, &lights).unwrap();
        let (normals, mask) = spec.geometry();
        let albedo = spec.albedo_map();
        for (j, l) in lights.iter().enumerate() {
            let l = l.map(|v| v as f64);
            let h = {
                let v = [l[0], l[1], l[2] + 1.0];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                v.map(|x| x / n)
            };
            for p in 0..s.pixels() {
                let n = normals[p];
                let ndl: f64 = (0..3).map(|k| n[k] * l[k]).sum();
                let ndh: f64 = (0..3).map(|k| n[k] * h[k]).sum();
                let want = if mask[p] && ndl > 0.0 {
                    albedo[p] * ndl + 0.4 * ndh.max(0.0).powf(20.0)
                } else {
                    0.0
                };
                for c in 0..2 {
                    let got = s.image(j)[p * 2 + c] as f64;
                    assert!((got - want).abs() < 1e-6, "{kind} light {j} pixel {p}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn sphere_geometry() {
    let spec = SceneSpec::lambertian_sphere(21, 0);
    let (normals, mask) = spec.geometry();
    // center pixel faces the camera, the top of the disc points up
    assert!((normals[10 * 21 + 10][2] - 1.0).abs() < 1e-12);
    let top = (0..21).find(|&y| mask[y * 21 + 10]).unwrap();
    assert!(normals[top * 21 + 10][1] > 0.5);
    for (n, &m) in normals.iter().zip(&mask) {
        if m {
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-12);
            assert!(n[2] >= 0.0);
        }
    }
}

#[test]
fn noise_never_produces_negative_intensity() {
    let mut spec = SceneSpec::lambertian_sphere(16, 2);
    spec.noise = 0.2;
    let lights = sample_lights(5, 0.2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let s = render_sample(&spec, &lights).unwrap();
    assert!(s.images.iter().all(|&v| v >= 0.0));
    assert_ne!(s, render_sample(&SceneSpec { noise: 0.0, ..spec }, &lights).unwrap());
}

fn stitch(sample: &PhotoSample, patches: &[PhotoSample], size: usize) -> Vec<f32> {
    let mut out = vec![f32::NAN; sample.images.len()];
    let (h, w, c) = (sample.height, sample.width, sample.channels);
    let mut k = 0;
    for top in (0..=h - size).step_by(size) {
        for left in (0..=w - size).step_by(size) {
            let p = &patches[k];
            k += 1;
            for j in 0..sample.light_count() {
                for y in 0..size {
                    for x in 0..size {
                        for ch in 0..c {
                            out[((j * h + top + y) * w + left + x) * c + ch] =
                                p.images[((j * size + y) * size + x) * c + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn tiled_patches_stitch_back_to_the_image() {
    let g = GenConfig {
        channels: 2,
        size: 24,
        lights: 3,
        ..Default::default()
    };
    let s = g.render(0).unwrap();
    let patches = extract_patches(&s, 8, 8, 0.0).unwrap();
    assert_eq!(patches.len(), 9);
    assert_eq!(stitch(&s, &patches, 8), s.images);
    let masked = extract_patches(&s, 8, 8, 0.5).unwrap();
    assert!(masked.len() < 9 && !masked.is_empty());
    assert!(extract_patches(&s, 25, 8, 0.0).is_err());
}

#[test]
fn dataset_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 4,
        kind: None,
        size: 16,
        channels: 3,
        lights: 5,
        max_specular: 0.3,
        lambertian_fraction: 0.5,
        noise: 0.01,
        seed: 4,
        ..Default::default()
    };
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.len(), 4);
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    let (_, samples) = load_dataset(dir.path()).unwrap();
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s, &cfg.render(i).unwrap());
    }
    let echoed: Vec<&str> = manifest.config.iter().map(|(k, _)| k.as_str()).collect();
    assert!(echoed.contains(&"seed") && echoed.contains(&"lights"));
}

#[test]
fn damaged_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.txt"), "PSDATA v9\nx.pss\n").unwrap();
    let e = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(e.contains("manifest.txt"), "{e}");
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn normal_png_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.png");
    let map = pst_core::model::NormalMap {
        height: 1,
        width: 3,
        normals: vec![[0.0, 0.0, 1.0], [1.0, -1.0, 0.0], [0.3, 0.3, 0.3]],
        mask: vec![true, true, false],
    };
    write_normal_png(&path, &map).unwrap();
    let decoder = png::Decoder::new(std::fs::File::open(&path).unwrap());
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (3, 1));
    assert_eq!(&buf[..9], &[128, 128, 255, 255, 0, 128, 0, 0, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sample_files_round_trip_bit_exactly(seed in any::<u64>(), size in 3usize..12, c in 1usize..4, m in 1usize..6, flip in any::<prop::sample::Index>()) {
        let mut spec = SceneSpec::lambertian_sphere(size, seed);
        spec.channels = c;
        spec.noise = 0.05;
        let lights = sample_lights(m, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = render_sample(&spec, &lights).unwrap();
        let bytes = encode_sample(&s).unwrap();
        let back = decode_sample(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(encode_sample(&back).unwrap(), bytes.clone());
        let mut bad = bytes.clone();
        let at = flip.index(bad.len() - 7) + 7;
        bad[at] ^= 0x10;
        prop_assert!(decode_sample(&bad).is_err());
        let e = decode_sample(&bytes[..bytes.len() - 3]);
        prop_assert_eq!(e, Err(ParseError::Truncated));
    }
}
