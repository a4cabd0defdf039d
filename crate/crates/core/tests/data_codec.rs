use bginpaint_core::codec::{decode, downsample_mask, encode, ImageRaster, Mask};
use bginpaint_core::imageio::{load_image, load_mask, save_image, save_mask};
use bginpaint_core::model::{image_latent, latent_image};
use bginpaint_core::synth::{self, load_dataset, write_dataset, NUM_CLASSES};
use proptest::prelude::*;

fn quantized_image(h: usize, w: usize, values: &[u8]) -> ImageRaster {
    ImageRaster::new(h, w, values.iter().map(|&v| v as f32 / 255.0).collect()).unwrap()
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(10, dir.path(), 4).unwrap();
    assert_eq!(manifest.entries.len(), 10);
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, synth::generate(10, 4));
    // Same seed, same bytes.
    let again = tempfile::tempdir().unwrap();
    write_dataset(10, again.path(), 4).unwrap();
    for f in ["manifest.tsv", "rec_3/target.png", "rec_3/meta.json", "rec_7/mask.png"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_record_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(2, dir.path(), 1).unwrap();
    std::fs::remove_file(dir.path().join("rec_1/reference.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("reference.png"), "{err}");
}

#[test]
fn every_block_of_eight_covers_all_classes() {
    let plan = synth::dataset_plan(64, 12);
    for block in plan.chunks(NUM_CLASSES) {
        let mut seen: Vec<usize> = block.iter().map(|e| e.class.id()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..NUM_CLASSES).collect::<Vec<_>>());
    }
}

#[test]
fn png_round_trip_is_lossless_for_quantized_values() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth::make_sample(5);
    let p = dir.path().join("t.png");
    save_image(&s.target, &p).unwrap();
    assert!(load_image(&p).unwrap().bit_eq(&s.target));
    let mp = dir.path().join("m.png");
    save_mask(&s.mask, &mp).unwrap();
    assert_eq!(load_mask(&mp).unwrap(), s.mask);
}

#[test]
fn model_space_mapping_inverts_on_valid_pixels() {
    let s = synth::make_sample(6);
    let z = image_latent(&s.target, 2).unwrap();
    assert!(z.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    let back = latent_image(&z).unwrap();
    for (a, b) in back.data.iter().zip(&s.target.data) {
        assert!((a - b).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn encode_decode_is_exact(hb in 1usize..6, wb in 1usize..6, seed in any::<u64>()) {
        let (h, w) = (2 * hb, 2 * wb);
        let values: Vec<u8> = (0..h * w * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
        let img = quantized_image(h, w, &values);
        let z = encode(&img, 2).unwrap();
        prop_assert_eq!((z.h, z.w, z.channels), (hb, wb, 12));
        prop_assert!(decode(&z).unwrap().bit_eq(&img));
    }

    #[test]
    fn downsampled_mask_takes_top_left_pixel(bits in proptest::collection::vec(any::<bool>(), 64)) {
        let m = Mask::new(8, 8, bits.iter().map(|&b| f32::from(u8::from(b))).collect()).unwrap();
        let g = downsample_mask(&m, 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert_eq!(g.data[i * 4 + j] > 0.5, m.get(2 * i, 2 * j));
            }
        }
    }
}

/// Pixel-center count of each product silhouette, recomputed from the shape
/// geometry rather than through the generator.
fn silhouette_area(shape: usize, radius: u32) -> usize {
    let r = radius as f32;
    let mut n = 0;
    for y in -12..12 {
        for x in -12..12 {
            let (dx, dy) = (x as f32 + 0.5, y as f32 + 0.5);
            let inside = match shape {
                0 => dx * dx + dy * dy <= (0.9 * r) * (0.9 * r),
                1 => dx.abs() <= 0.77 * r && dy.abs() <= 0.77 * r,
                _ => {
                    let (hw, hh) = (1.06 * r, 1.14 * r);
                    dy.abs() <= hh && dx.abs() <= hw * (dy + hh) / (2.0 * hh)
                }
            };
            n += usize::from(inside);
        }
    }
    n
}

#[test]
fn every_shape_and_radius_has_area_in_range() {
    for shape in 0..3 {
        for radius in synth::MIN_RADIUS..=synth::MAX_RADIUS {
            let a = silhouette_area(shape, radius);
            assert!((36..=120).contains(&a), "shape {shape} radius {radius}: {a}");
        }
    }
}

proptest! {
    #[test]
    fn generated_masks_have_area_in_range(seed in any::<u64>()) {
        let s = synth::make_sample(seed);
        prop_assert!((36..=120).contains(&s.mask.area()), "area {}", s.mask.area());
    }
}

#[test]
fn class_histogram_is_balanced() {
    let mut counts = [0usize; NUM_CLASSES];
    for s in synth::generate(2000, 12) {
        counts[s.prompt.id()] += 1;
    }
    for c in counts {
        assert!((c as f64 - 250.0).abs() <= 0.05 * 250.0, "{counts:?}");
    }
}
