use std::path::Path;

use proptest::prelude::*;

use codesynth::dataset::{
    dedup, validate_shard, write_shard, DatasetRecord, Provenance, StagedRecord, WriteOptions,
};
use codesynth::instruction::EmitStyle;
use codesynth::pipeline::Category;
use codesynth::pointing::{MarkerSpec, PointAnnotation};
use codesynth::{InstructionTriplet, Tool};

fn record(dir: &Path, id: &str, category: Category, code: &str, n_qa: usize) -> StagedRecord {
    let src = dir.join(format!("{id}.src.png"));
    let shade = id.bytes().fold(0u8, |a, b| a.wrapping_add(b));
    image::RgbImage::from_fn(300, 270, |x, y| {
        image::Rgb([(x % 250) as u8, shade, (y % 250) as u8])
    })
    .save(&src)
    .unwrap();
    let pointing = category.is_pointing();
    StagedRecord {
        image_src: src,
        record: DatasetRecord {
            id: id.into(),
            category,
            pipeline_id: format!("{category}-html"),
            tool: Tool::Html,
            persona: "a florist".into(),
            topic: "a price list".into(),
            query: "price lists".into(),
            code: code.into(),
            image: format!("images/{id}.png"),
            width: 300,
            height: 270,
            qa: if pointing {
                vec![]
            } else {
                (0..n_qa.max(1))
                    .map(|i| {
                        InstructionTriplet::new(&format!("Q{i}"), "E", &format!("A{i}")).unwrap()
                    })
                    .collect()
            },
            points: if pointing {
                vec![PointAnnotation::from_pixels(
                    "Point".into(),
                    &[(12.5, 200.0)],
                    300,
                    270,
                    &MarkerSpec::default(),
                )
                .unwrap()]
            } else {
                vec![]
            },
            provenance: Provenance {
                job_index: 0,
                job_seed: 9,
                code_model: "m".into(),
                instruction_model: None,
                source_record: None,
                stages: vec![],
            },
        },
    }
}

fn specs() -> impl Strategy<Value = Vec<(String, bool, u8, usize)>> {
    prop::collection::btree_map("[0-9a-f]{8}", (any::<bool>(), 0u8..4, 1usize..9), 1..7)
        .prop_map(|m| m.into_iter().map(|(id, (p, c, q))| (id, p, c, q)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn write_then_validate_passes_and_is_byte_stable(spec in specs()) {
        let tmp = tempfile::tempdir().unwrap();
        let staged: Vec<StagedRecord> = spec.iter().map(|(id, p, c, q)| {
            let cat = if *p { Category::Pointing } else { Category::Tables };
            record(tmp.path(), id, cat, &format!("code {c}"), *q)
        }).collect();
        let opts = WriteOptions { emit: Some(EmitStyle::Dual), ..Default::default() };
        let mut reversed = staged.clone();
        reversed.reverse();
        let a = write_shard(staged, &tmp.path().join("a"), &opts).unwrap();
        let b = write_shard(reversed, &tmp.path().join("b"), &opts).unwrap();
        prop_assert!(validate_shard(&a.dir).is_empty());
        let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        prop_assert_eq!(bytes(&a.dir, "manifest.jsonl"), bytes(&b.dir, "manifest.jsonl"));
        prop_assert_eq!(bytes(&a.dir, "train.jsonl"), bytes(&b.dir, "train.jsonl"));
        let triplets: usize = a.records.iter().map(|r| r.qa.len()).sum();
        prop_assert_eq!(a.stats.training_rows, 2 * triplets);
        prop_assert_eq!(a.stats.per_category.values().sum::<usize>(), a.records.len());
    }

    #[test]
    fn dedup_keeps_first_by_id(spec in specs()) {
        let tmp = tempfile::tempdir().unwrap();
        let records: Vec<DatasetRecord> = spec.iter()
            .map(|(id, _, c, q)| record(tmp.path(), id, Category::Charts, &format!("code {c}"), *q).record)
            .collect();
        let mut shuffled = records.clone();
        shuffled.reverse();
        let (kept, dropped) = dedup(records.clone());
        let (kept2, dropped2) = dedup(shuffled);
        prop_assert_eq!(&kept, &kept2);
        prop_assert_eq!(dropped, dropped2);
        prop_assert_eq!(kept.len() + dropped, records.len());
        let mut sorted = records.clone();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        for r in &kept {
            let first = sorted.iter().find(|s| s.code == r.code).unwrap();
            prop_assert_eq!(&first.id, &r.id);
        }
    }
}
