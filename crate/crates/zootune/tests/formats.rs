use proptest::prelude::*;
use zootune::{csvio, idx, zooc};
use zootune_core::checkpoint::{AnyTensor, Checkpoint};
use zootune_core::data::Dataset;
use zootune_core::train::{GateSample, RunPoint, RunRecord};
use zootune_core::zoo::{BatchStats, TeState, TE_DECAY};
use zootune_core::Tensor;

fn any_tensor() -> impl Strategy<Value = AnyTensor> {
    (prop::collection::vec(1usize..4, 0..4), any::<bool>()).prop_flat_map(|(shape, double)| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e6f64..1e6, n).prop_map(move |d| {
            if double {
                AnyTensor::F64(Tensor::new(&shape, d).unwrap())
            } else {
                AnyTensor::F32(Tensor::new(&shape, d.into_iter().map(|x| x as f32).collect()).unwrap())
            }
        })
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        prop::collection::btree_map("[a-z_]{1,12}", "[ -~]{0,40}", 0..5),
        prop::collection::btree_map("[a-z0-9.]{1,24}", any_tensor(), 0..6),
    )
        .prop_map(|(meta, tensors)| Checkpoint { metadata: meta.into_iter().collect(), tensors: tensors.into_iter().collect() })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zooc_roundtrips(ck in checkpoint()) {
        let bytes = zooc::encode(&ck).unwrap();
        prop_assert_eq!(zooc::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn truncated_zooc_is_an_error(ck in checkpoint(), cut in 0.0f64..1.0) {
        let bytes = zooc::encode(&ck).unwrap();
        let len = (cut * bytes.len() as f64) as usize;
        prop_assert!(zooc::decode(&bytes[..len]).is_err());
    }

    #[test]
    fn idx_roundtrips(dims in prop::collection::vec(1usize..6, 1..5), seed in any::<u8>()) {
        let n: usize = dims.iter().product();
        let data: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let bytes = idx::encode(&dims, &data).unwrap();
        let (d, payload) = idx::decode(&bytes).unwrap();
        prop_assert_eq!(d, dims);
        prop_assert_eq!(payload, &data[..]);
    }

    #[test]
    fn dataset_idx_roundtrips(n in 1usize..8, channels in 1usize..4, side in 1usize..6, classes in 1usize..5) {
        let pixels: Vec<u8> = (0..n * channels * side * side).map(|i| (i * 7) as u8).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let d = Dataset::new(pixels, labels, channels, side, classes, "p").unwrap();
        let (img, lab) = idx::dataset_to_bytes(&d).unwrap();
        let back = idx::dataset_from_bytes(&img, &lab, Some(classes), "p").unwrap();
        prop_assert_eq!(back.pixels, d.pixels);
        prop_assert_eq!(back.labels, d.labels);
        prop_assert_eq!((back.channels, back.side, back.classes), (channels, side, classes));
    }

    #[test]
    fn run_csv_roundtrips_exactly(points in prop::collection::vec((any::<f64>(), prop::option::of(0.0f64..=1.0)), 1..30)) {
        let points: Vec<RunPoint> = points
            .into_iter()
            .enumerate()
            .filter(|(_, (l, _))| l.is_finite())
            .map(|(iteration, (train_loss, eval_metric))| RunPoint { iteration, train_loss, eval_metric })
            .collect();
        prop_assume!(!points.is_empty());
        let rec = RunRecord { points: points.clone(), ..RunRecord::default() };
        prop_assert_eq!(csvio::read_run_csv(&csvio::run_csv(&rec).unwrap()).unwrap(), points);
    }

    /// Folding the logged gate means back through the update rule
    /// reproduces the stored ensemble.
    #[test]
    fn gate_trace_replays_to_stored_ensemble(
        trace in prop::collection::vec(prop::collection::vec(prop::collection::vec(0.001f64..0.999, 3), 2), 1..40),
    ) {
        let mut te = TeState::new(2, TE_DECAY).unwrap();
        let mut rec = RunRecord::default();
        for (iteration, layers) in trace.iter().enumerate() {
            for (layer, means) in layers.iter().enumerate() {
                te.update(layer, &BatchStats::new(8, means.clone()).unwrap());
                for (source, &gate_mean) in means.iter().enumerate() {
                    rec.gate_trace.push(GateSample { iteration, layer, source, gate_mean });
                }
            }
        }
        let stored = csvio::read_te_csv(&csvio::te_csv(&te).unwrap()).unwrap();
        prop_assert_eq!(&stored, &te);
        let samples = csvio::read_gates_csv(&csvio::gates_csv(&rec).unwrap()).unwrap();
        let mut replay: Vec<Vec<Option<f64>>> = vec![vec![None; 3]; 2];
        for g in samples {
            let slot = &mut replay[g.layer][g.source];
            *slot = Some(match *slot {
                None => g.gate_mean,
                Some(a) => TE_DECAY * a + (1.0 - TE_DECAY) * g.gate_mean,
            });
        }
        for (layer, row) in replay.iter().enumerate() {
            for (source, a) in row.iter().enumerate() {
                prop_assert!((a.unwrap() - stored.get(layer).unwrap()[source]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zooc_rejects_bad_magic_and_wrong_digest() {
    let mut ck = Checkpoint::new();
    ck.set_meta("kind", "plain");
    let mut bytes = zooc::encode(&ck).unwrap();
    bytes[0] = b'X';
    assert!(zooc::decode(&bytes).is_err());

    let cfg = zootune_core::backbone::BackboneConfig::compact();
    let mut ck = zootune_core::backbone::build_plain_backbone::<f32>(&cfg, 0).unwrap().to_checkpoint(true);
    assert!(zooc::check_digest(&ck).is_ok());
    ck.set_meta("backbone_digest", "0000000000000000");
    assert!(zooc::check_digest(&ck).is_err());
}
