//! Property tests of the on-disk formats: every writer/reader pair must
//! round trip exactly (bitwise where the format is binary), and truncated
//! or corrupted inputs must fail with an error instead of garbage.

use proptest::prelude::*;

use anchorfuse::dataset::{
    generate_synthetic, load_dataset, save_dataset, write_synthetic_dir, SyntheticSpec,
};
use anchorfuse::eval::{
    load_eval_records, save_eval_records, BoundingBox, EvalRecord, GridCellSet,
};
use anchorfuse::geo::{YearRaster, EMBED_DIM};
use anchorfuse::sft::{load_checkpoint, save_checkpoint, ModelConfig, ToyVlm};
use anchorfuse::tensor::{read_tensor, write_tensor};

// --------------------------------------------------------------------------
// Tensor container
// --------------------------------------------------------------------------

/// Dims of rank 1..=4 with the matching payload, as raw bit patterns so the
/// round trip is checked for every representable value (NaN included).
fn arb_tensor() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec(1usize..=4, 1..=4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        let data = prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n);
        (Just(dims), data)
    })
}

proptest! {
    #[test]
    fn tensor_files_round_trip_every_bit_pattern((dims, data) in arb_tensor()) {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &dims, &data).unwrap();

        let (dims2, data2) = read_tensor(&mut &buf[..]).unwrap();
        prop_assert_eq!(&dims2, &dims);
        let bits: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = data2.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, bits2);
    }

    #[test]
    fn truncated_tensor_files_are_rejected(
        (dims, data) in arb_tensor(),
        frac in 0.0f64..1.0,
    ) {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &dims, &data).unwrap();
        let cut = ((buf.len() as f64) * frac) as usize; // strictly < len
        prop_assert!(read_tensor(&mut &buf[..cut]).is_err());
    }

    #[test]
    fn tensor_magic_is_checked(byte in 0usize..4, (dims, data) in arb_tensor()) {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &dims, &data).unwrap();
        buf[byte] ^= 0xff;
        prop_assert!(read_tensor(&mut &buf[..]).is_err());
    }
}

// --------------------------------------------------------------------------
// Embedding-field rasters
// --------------------------------------------------------------------------

fn arb_raster() -> impl Strategy<Value = YearRaster> {
    (
        any::<i32>(),
        -180.0f64..179.0,
        0.001f64..10.0,
        -89.0f64..88.0,
        0.001f64..1.9,
        1u32..=3,
        1u32..=3,
    )
        .prop_flat_map(|(year, lon0, dlon, lat0, dlat, cells_x, cells_y)| {
            let n = cells_x as usize * cells_y as usize * EMBED_DIM;
            prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n).prop_map(
                move |data| {
                    YearRaster::new(
                        year,
                        lon0,
                        lat0,
                        lon0 + dlon,
                        lat0 + dlat,
                        cells_x,
                        cells_y,
                        data,
                    )
                    .unwrap()
                },
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rasters_round_trip_bitwise(raster in arb_raster()) {
        let mut buf = Vec::new();
        raster.write_aefs(&mut buf).unwrap();

        let back = YearRaster::read_aefs(&mut &buf[..]).unwrap();
        prop_assert_eq!(back.year, raster.year);
        prop_assert_eq!(back.lon_min.to_bits(), raster.lon_min.to_bits());
        prop_assert_eq!(back.lat_min.to_bits(), raster.lat_min.to_bits());
        prop_assert_eq!(back.lon_max.to_bits(), raster.lon_max.to_bits());
        prop_assert_eq!(back.lat_max.to_bits(), raster.lat_max.to_bits());
        prop_assert_eq!(back.cells_x, raster.cells_x);
        prop_assert_eq!(back.cells_y, raster.cells_y);
        let bits: Vec<u32> = raster.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(bits, bits2);
    }

    #[test]
    fn truncated_rasters_are_rejected(raster in arb_raster(), frac in 0.0f64..1.0) {
        let mut buf = Vec::new();
        raster.write_aefs(&mut buf).unwrap();
        let cut = ((buf.len() as f64) * frac) as usize;
        prop_assert!(YearRaster::read_aefs(&mut &buf[..cut]).is_err());
    }

    #[test]
    fn raster_magic_is_checked(byte in 0usize..4, raster in arb_raster()) {
        let mut buf = Vec::new();
        raster.write_aefs(&mut buf).unwrap();
        buf[byte] ^= 0xff;
        prop_assert!(YearRaster::read_aefs(&mut &buf[..]).is_err());
    }
}

// --------------------------------------------------------------------------
// Dataset records
// --------------------------------------------------------------------------

fn arb_spec() -> impl Strategy<Value = SyntheticSpec> {
    (
        any::<u64>(),
        1usize..=3,
        1usize..=4,
        1usize..=5,
        2usize..=4,
        2usize..=4,
        any::<bool>(),
        4usize..=8,
    )
        .prop_map(
            |(seed, n_samples, n_classes, max_count, n_lon, n_lat, inline, image_size)| {
                SyntheticSpec {
                    seed,
                    n_samples,
                    classes: ["alpha", "beta", "gamma", "delta"][..n_classes]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    max_count,
                    n_lon,
                    n_lat,
                    inline_features: inline,
                    image_size,
                    ..SyntheticSpec::default()
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Whatever the generator settings, the records written to disk load
    /// back equal and re-save byte-identically (both dataset files).
    #[test]
    fn datasets_round_trip_byte_for_byte(spec in arb_spec()) {
        let out = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("bench");
        write_synthetic_dir(&out, &root).unwrap();

        for (name, generated) in [("d1.jsonl", &out.d1), ("d2.jsonl", &out.d2)] {
            let path = root.join(name);
            let loaded = load_dataset(&path).unwrap();
            prop_assert_eq!(&loaded, generated, "{} records differ", name);

            let copy = dir.path().join(format!("copy_{name}"));
            save_dataset(&loaded, &copy).unwrap();
            prop_assert_eq!(
                std::fs::read(&copy).unwrap(),
                std::fs::read(&path).unwrap(),
                "{} bytes differ after a load/save cycle",
                name
            );
        }
    }
}

// --------------------------------------------------------------------------
// Model checkpoints
// --------------------------------------------------------------------------

fn arb_model_config() -> impl Strategy<Value = ModelConfig> {
    (
        (8usize..=16, 2usize..=6, 1usize..=3, 1usize..=3),
        (1usize..=2, 2usize..=6, 2usize..=6, 2usize..=8),
        (1usize..=3, 0.5f64..4.0, any::<bool>()),
    )
        .prop_map(
            |(
                (vocab_size, channels, grid_h, grid_w),
                (patch, embed_dim, prior_dim, tlm_hidden),
                (lora_rank, lora_alpha, tlm_enabled),
            )| ModelConfig {
                vocab_size,
                channels,
                grid_h,
                grid_w,
                patch,
                embed_dim,
                prior_dim,
                tlm_hidden,
                lora_rank,
                lora_alpha,
                tlm_enabled,
                ..ModelConfig::default()
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// save -> load -> save produces identical bytes for any architecture,
    /// and the loaded model reports the saved configuration.
    #[test]
    fn checkpoints_round_trip_byte_for_byte(config in arb_model_config(), seed in any::<u64>()) {
        let model = ToyVlm::new(config.clone(), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.fgpt");
        let second = dir.path().join("b.fgpt");

        save_checkpoint(&model, &first).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        prop_assert_eq!(loaded.config(), &config);
        save_checkpoint(&loaded, &second).unwrap();

        prop_assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let model = ToyVlm::new(ModelConfig::default(), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fgpt");
        save_checkpoint(&model, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = ((bytes.len() as f64) * frac) as usize;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        prop_assert!(load_checkpoint(&path).is_err());
    }
}

#[test]
fn checkpoint_magic_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.fgpt");
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

// --------------------------------------------------------------------------
// Evaluation records
// --------------------------------------------------------------------------

fn arb_cells() -> impl Strategy<Value = GridCellSet> {
    prop::collection::btree_set(0u32..=8, 0..=9).prop_map(|s| GridCellSet::new(s).unwrap())
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (
        0.0f64..100.0,
        0.0f64..100.0,
        0.001f64..50.0,
        0.001f64..50.0,
        prop::option::of("[a-z]{1,6}"),
    )
        .prop_map(|(x1, y1, w, h, label)| {
            let mut b = BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap();
            b.class_label = label;
            b
        })
}

fn arb_eval_record() -> impl Strategy<Value = EvalRecord> {
    let id = "[a-z0-9_]{0,8}";
    prop_oneof![
        (id, any::<i64>(), any::<i64>()).prop_map(|(image_id, prediction, ground_truth)| {
            EvalRecord::Counting { image_id, prediction, ground_truth }
        }),
        (id, arb_cells(), arb_cells()).prop_map(|(image_id, prediction, ground_truth)| {
            EvalRecord::Localization { image_id, prediction, ground_truth }
        }),
        (id, "[a-z ]{0,12}", "[a-z]{1,8}").prop_map(|(image_id, prediction, ground_truth)| {
            EvalRecord::Classification { image_id, prediction, ground_truth }
        }),
        (id, "\\PC{0,40}", prop::collection::vec(arb_box(), 0..3)).prop_map(
            |(image_id, prediction_text, ground_truth)| EvalRecord::Detection {
                image_id,
                prediction_text,
                ground_truth,
            }
        ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_records_round_trip(records in prop::collection::vec(arb_eval_record(), 0..12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        save_eval_records(&records, &path).unwrap();
        let back = load_eval_records(&path).unwrap();
        prop_assert_eq!(back, records);
    }
}
