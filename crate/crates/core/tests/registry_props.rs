use std::collections::HashMap;

use hrc_core::geometry::Pose2;
use hrc_core::perception::{Detection, ObjectRegistry};
use proptest::prelude::*;

const LABELS: [&str; 5] = ["cup", "bowl", "box", "drawer", "wiper"];

fn event() -> impl Strategy<Value = Detection> {
    (
        0..LABELS.len(),
        -1.0f64..1.0,
        -1.0f64..1.0,
        0.0f64..100.0,
        0.5f64..1.0,
    )
        .prop_map(|(i, x, y, t, c)| Detection {
            label: LABELS[i].to_string(),
            measured_pose: Pose2::at(x, y),
            confidence: c,
            timestamp: (t * 100.0).round() / 100.0,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Streams of 10^4 detections in random batches, with out-of-order
    /// timestamps so that some detections arrive stale.
    #[test]
    fn registered_once_and_updates_move_forward(
        events in prop::collection::vec(event(), 10_000),
        batch in 1usize..50,
    ) {
        let mut reg = ObjectRegistry::new();
        let mut first: HashMap<String, f64> = HashMap::new();
        let mut latest: HashMap<String, (f64, Pose2)> = HashMap::new();
        let mut stale = 0u64;

        for chunk in events.chunks(batch) {
            let before: HashMap<String, f64> =
                reg.entries().map(|(k, e)| (k.to_string(), e.last_update)).collect();
            reg.ingest(chunk);
            for det in chunk {
                first.entry(det.label.clone()).or_insert(det.timestamp);
                match latest.get(&det.label) {
                    Some((t, _)) if det.timestamp < *t => stale += 1,
                    _ => {
                        latest.insert(det.label.clone(), (det.timestamp, det.measured_pose));
                    }
                }
            }
            for (label, entry) in reg.entries() {
                prop_assert_eq!(entry.registered_at, first[label]);
                if let Some(prev) = before.get(label) {
                    prop_assert!(entry.last_update >= *prev);
                }
                prop_assert_eq!(entry.last_update, latest[label].0);
                prop_assert_eq!(entry.current_pose, latest[label].1);
            }
        }
        prop_assert_eq!(reg.stale_detections(), stale);
        prop_assert_eq!(reg.len(), first.len());
        prop_assert_eq!(reg.lookup("unicorn"), None);
    }
}
