use hyperattn::interleave::{
    build_cross_mask, build_rope_map, build_sequence, parse_fixture_text, select_crop_grid, to_fixture_text,
    CropPolicy, Segment, SlotRole,
};
use proptest::prelude::*;

const IMG: u32 = 900;

fn golden_segments() -> Vec<Segment> {
    vec![
        Segment::text(vec![11, 12]),
        Segment::image(7, 1000, 500),
        Segment::text(vec![13]),
        Segment::video(8, 2),
        Segment::text(vec![14, 15]),
    ]
}

#[test]
fn golden_sequence_fixture() {
    let seq = build_sequence(&golden_segments(), CropPolicy::On, IMG).unwrap();
    let golden = include_str!("fixtures/golden_sequence.txt");
    assert_eq!(to_fixture_text(&seq), golden);
    assert_eq!(parse_fixture_text(golden).unwrap(), seq);
}

fn segment() -> impl Strategy<Value = Segment> {
    prop_oneof![
        prop::collection::vec(0u32..IMG, 1..5).prop_map(Segment::text),
        (0u64..1000, 1u32..3000, 1u32..3000).prop_map(|(id, w, h)| Segment::image(id, w, h)),
        (0u64..1000, 1u32..5).prop_map(|(id, f)| Segment::video(id, f)),
    ]
}

proptest! {
    #[test]
    fn expansion_counts(segments in prop::collection::vec(segment(), 1..8), crop in any::<bool>()) {
        let policy = if crop { CropPolicy::On } else { CropPolicy::Off };
        let seq = build_sequence(&segments, policy, IMG).unwrap();
        let mut placeholders = 0;
        let mut slots = 0;
        let mut text = 0;
        for s in &segments {
            match s {
                Segment::Text { tokens } => text += tokens.len(),
                Segment::Image { width, height, .. } => {
                    placeholders += 1;
                    slots += 1;
                    if crop {
                        slots += select_crop_grid(*width as i64, *height as i64).unwrap().cells() as usize;
                    }
                }
                Segment::Video { frame_count, .. } => {
                    placeholders += *frame_count as usize;
                    slots += *frame_count as usize;
                }
            }
        }
        prop_assert_eq!(seq.len(), text + placeholders);
        prop_assert_eq!(seq.placeholder_positions().len(), placeholders);
        prop_assert_eq!(seq.num_slots(), slots);
        seq.validate().unwrap();
    }

    #[test]
    fn slots_point_at_placeholders(segments in prop::collection::vec(segment(), 1..8), crop in any::<bool>()) {
        let policy = if crop { CropPolicy::On } else { CropPolicy::Off };
        let seq = build_sequence(&segments, policy, IMG).unwrap();
        for (i, s) in seq.slots.iter().enumerate() {
            prop_assert_eq!(s.slot_index, i);
            prop_assert_eq!(seq.tokens[s.placeholder_position], IMG);
        }
        prop_assert!(seq.slots.windows(2).all(|w| w[0].placeholder_position <= w[1].placeholder_position));
        // the global view precedes its crops
        for w in seq.slots.windows(2) {
            if let SlotRole::Crop { .. } = w[1].role {
                prop_assert_eq!(w[0].placeholder_position, w[1].placeholder_position);
                let after_frame = matches!(w[0].role, SlotRole::Frame { .. });
                prop_assert!(!after_frame);
            }
        }
    }

    #[test]
    fn mask_and_positions(segments in prop::collection::vec(segment(), 1..8), crop in any::<bool>()) {
        let policy = if crop { CropPolicy::On } else { CropPolicy::Off };
        let seq = build_sequence(&segments, policy, IMG).unwrap();
        let mask = build_cross_mask(&seq);
        let rope = build_rope_map(&seq);
        prop_assert_eq!(rope.query_positions, (0..seq.len()).collect::<Vec<_>>());
        for (s, slot) in seq.slots.iter().enumerate() {
            prop_assert_eq!(rope.visual_key_positions[s], slot.placeholder_position);
            for t in 0..seq.len() {
                prop_assert_eq!(mask.is_visible(t, s), slot.placeholder_position <= t);
            }
        }
    }

    #[test]
    fn fixture_roundtrip(segments in prop::collection::vec(segment(), 1..8), crop in any::<bool>()) {
        let policy = if crop { CropPolicy::On } else { CropPolicy::Off };
        let seq = build_sequence(&segments, policy, IMG).unwrap();
        prop_assert_eq!(parse_fixture_text(&to_fixture_text(&seq)).unwrap(), seq);
    }
}
