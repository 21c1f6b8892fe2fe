//! Data pipeline: decode fixture, tiling properties, split partitions.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anomgan::data::{
    build_one_vs_all_split, extract_patches, load_image, reassemble, reflect_pad, Label, PatchSpec, SourceImage,
    Split,
};
use anomgan_tensor::Tensor;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Shape line then channel-major 8-bit values, as written by the
/// reference decoder.
fn expected(name: &str) -> (Vec<usize>, Vec<f64>) {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    let mut lines = text.lines();
    let shape = lines.next().unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    let values = lines
        .next()
        .unwrap()
        .split(' ')
        .map(|v| v.parse::<f64>().unwrap() / 127.5 - 1.0)
        .collect();
    (shape, values)
}

#[test]
fn checkerboard_decodes_to_reference_array() {
    for (png, txt, channels) in [
        ("checkerboard.png", "checkerboard.txt", 3),
        ("checkerboard_gray.png", "checkerboard_gray.txt", 1),
    ] {
        let (shape, values) = expected(txt);
        let t = load_image(&fixture(png), channels).unwrap();
        assert_eq!(t.shape(), &shape[..]);
        assert_eq!(t.data(), &values[..], "{png}");
    }
}

#[test]
fn grayscale_is_replicated_to_three_channels() {
    let (_, values) = expected("checkerboard_gray.txt");
    let t = load_image(&fixture("checkerboard_gray.png"), 3).unwrap();
    for c in 0..3 {
        assert_eq!(&t.data()[c * 120..(c + 1) * 120], &values[..]);
    }
}

#[test]
fn three_hundred_pixel_image_pads_by_reflection() {
    let img = Tensor::from_vec([1, 300, 300], (0..90_000).map(f64::from).collect());
    let patches = extract_patches(&img, &PatchSpec::new(256)).unwrap();
    assert_eq!(patches.len(), 4);
    let canvas = reassemble(&patches, 512, 512).unwrap();
    // Row 300 mirrors row 298, column 511 mirrors column 87.
    assert_eq!(canvas.data()[300 * 512], img.data()[298 * 300]);
    assert_eq!(canvas.data()[511], img.data()[87]);
    assert_eq!(canvas.data()[299 * 512 + 299], img.data()[299 * 300 + 299]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiles_cover_padded_image_exactly_once(c in 1usize..3, h in 32usize..120, w in 32usize..120, seed in any::<u64>()) {
        let data = (0..c * h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 997) as f64).collect();
        let img = Tensor::from_vec([c, h, w], data);
        let spec = PatchSpec::new(32);
        let patches = extract_patches(&img, &spec).unwrap();
        let (ph, pw) = (spec.padded_len(h), spec.padded_len(w));
        prop_assert_eq!(patches.len(), h.div_ceil(32) * w.div_ceil(32));
        let mut cover = vec![0u32; ph * pw];
        for p in &patches {
            for y in p.top..p.top + 32 {
                for x in p.left..p.left + 32 {
                    cover[y * pw + x] += 1;
                }
            }
        }
        prop_assert!(cover.iter().all(|&n| n == 1));
        prop_assert_eq!(reassemble(&patches, ph, pw).unwrap(), reflect_pad(&img, ph, pw).unwrap());
    }

    #[test]
    fn one_vs_all_partitions(assign in prop::collection::vec((0usize..4, any::<bool>()), 1..60), normal in 0usize..4) {
        let images: Vec<SourceImage> = assign
            .iter()
            .enumerate()
            .map(|(i, &(class, is_train))| SourceImage {
                path: format!("{i}.png").into(),
                class_tag: format!("c{class}"),
                split: if is_train { Split::Train } else { Split::Test },
                mask: None,
            })
            .collect();
        let normal_tag = format!("c{normal}");
        let known = images.iter().any(|i| i.class_tag == normal_tag);
        let result = build_one_vs_all_split(&images, &normal_tag);
        prop_assert_eq!(result.is_ok(), known);
        if let Ok((train, test)) = result {
            let train_paths: BTreeSet<_> = train.records.iter().map(|r| r.path.clone()).collect();
            let test_paths: BTreeSet<_> = test.records.iter().map(|r| r.path.clone()).collect();
            prop_assert!(train_paths.is_disjoint(&test_paths));
            prop_assert!(train.records.iter().all(|r| r.class_tag == normal_tag && r.label == Label::Normal));
            let others = images.iter().filter(|i| i.split == Split::Test && i.class_tag != normal_tag).count();
            prop_assert_eq!(test.count(Label::Anomalous), others);
            let expected_train = images.iter().filter(|i| i.split == Split::Train && i.class_tag == normal_tag).count();
            prop_assert_eq!(train.len(), expected_train);
        }
    }
}
