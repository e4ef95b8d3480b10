//! Score prediction records on the four benchmark tasks.
//!
//! Counting is exact-match accuracy; localization judges 3x3 grid-cell
//! sets at three strictness levels; classification reports micro accuracy
//! plus per-class tallies; detection parses boxes out of free text and
//! greedily matches them to ground truth by IoU.

use anchorfuse::eval::{
    box_iou, cells_from_boxes, parse_boxes_from_text, score_records, BoundingBox, EvalRecord,
    GridCellSet, TaskKind,
};

fn main() -> anyhow::Result<()> {
    // --- Detection text parsing ------------------------------------------
    // Model output is free text; bracketed coordinate groups become boxes,
    // optionally labeled by the preceding word. Malformed groups are
    // counted, not guessed at.
    let text = "ship [10, 20, 42, 55], harbor [0, 0, 31.5, 18], [bad, 1, 2, 3], [5, 5, 9, 9]";
    let parsed = parse_boxes_from_text(text);
    println!("parsed {} boxes ({} malformed group skipped):", parsed.boxes.len(), parsed.skipped);
    for b in &parsed.boxes {
        println!(
            "  {:?} [{}, {}, {}, {}]",
            b.class_label.as_deref().unwrap_or("-"),
            b.x1, b.y1, b.x2, b.y2
        );
    }

    let iou = box_iou(
        &BoundingBox::new(0.0, 0.0, 10.0, 10.0)?,
        &BoundingBox::new(5.0, 5.0, 15.0, 15.0)?,
    )?;
    println!("IoU of two half-overlapping 10x10 boxes: {iou:.4} (25/175)\n");

    // --- Grid cells from boxes --------------------------------------------
    // A 300x300 image divides into a 3x3 grid of 100px cells; a box claims
    // every cell whose interior it overlaps.
    let wide = BoundingBox::new(20.0, 20.0, 250.0, 80.0)?;
    let cells = cells_from_boxes(std::slice::from_ref(&wide), 300.0, 300.0);
    println!("box spanning the top band claims cells {:?}\n", cells.iter().collect::<Vec<_>>());

    // --- Records for all four tasks ---------------------------------------
    let records = vec![
        EvalRecord::Counting { image_id: "a".into(), prediction: 3, ground_truth: 3 },
        EvalRecord::Counting { image_id: "b".into(), prediction: 2, ground_truth: 5 },
        EvalRecord::Localization {
            image_id: "a".into(),
            prediction: GridCellSet::new([0, 1])?,
            ground_truth: GridCellSet::new([0, 1])?,
        },
        EvalRecord::Localization {
            image_id: "b".into(),
            prediction: GridCellSet::new([0, 1, 4])?,
            ground_truth: GridCellSet::new([0, 1])?,
        },
        EvalRecord::Localization {
            image_id: "c".into(),
            prediction: GridCellSet::new([8])?,
            ground_truth: GridCellSet::new([4])?,
        },
        EvalRecord::Classification {
            image_id: "a".into(),
            prediction: "harbor".into(),
            ground_truth: "harbor".into(),
        },
        EvalRecord::Classification {
            image_id: "b".into(),
            prediction: "urban".into(),
            ground_truth: "water".into(),
        },
        EvalRecord::Detection {
            image_id: "a".into(),
            prediction_text: "ship [10, 10, 50, 50], ship [200, 200, 240, 240]".into(),
            ground_truth: vec![
                BoundingBox::new(12.0, 8.0, 52.0, 48.0)?,
                BoundingBox::new(100.0, 100.0, 140.0, 140.0)?,
            ],
        },
    ];

    for task in [
        TaskKind::Counting,
        TaskKind::Localization,
        TaskKind::Classification,
        TaskKind::Detection,
    ] {
        println!("{}", score_records(&records, task, 0.5)?);
    }

    // Loosening the IoU threshold can only add true positives.
    println!("\ndetection across thresholds:");
    for threshold in [0.9, 0.5, 0.1] {
        println!("  iou >= {threshold}: {}", score_records(&records, TaskKind::Detection, threshold)?);
    }

    Ok(())
}
