mod common;

use std::collections::BTreeMap;

use common::mock_config;
use recontext::config::parse_config;
use recontext::demo::demo_products;
use recontext::pipeline::{Pipeline, PipelineError, Stage};

#[test]
fn same_seed_same_manifests_across_workdirs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = Pipeline::new(mock_config(a.path(), r#", "seed": 42"#)).unwrap();
    let pb = Pipeline::new(mock_config(b.path(), r#", "seed": 42"#)).unwrap();
    let sa = pa.run(&Stage::ALL).unwrap();
    let sb = pb.run(&Stage::ALL).unwrap();
    assert_eq!(sa.run_id, sb.run_id);
    assert_eq!(sa.content_hashes, sb.content_hashes);
    assert_eq!(sa.ranked, sb.ranked);
    for f in ["filter_report.csv", "rank_report.csv", "metrics_table.txt"] {
        assert_eq!(std::fs::read(pa.run_dir().join(f)).unwrap(), std::fs::read(pb.run_dir().join(f)).unwrap(), "{f}");
    }

    let c = tempfile::tempdir().unwrap();
    let pc = Pipeline::new(mock_config(c.path(), r#", "seed": 43"#)).unwrap();
    let sc = pc.run(&Stage::ALL).unwrap();
    assert_ne!(sc.run_id, sa.run_id);
    assert_ne!(sc.ranked, sa.ranked);
}

#[test]
fn stages_resume_from_recorded_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(mock_config(dir.path(), "")).unwrap();
    p.run(&[Stage::Ingest, Stage::Bank, Stage::Augment]).unwrap();
    // A fresh handle on the same workdir sees what the first recorded.
    let q = Pipeline::new(mock_config(dir.path(), "")).unwrap();
    assert!(matches!(q.run(&[Stage::Assemble]), Err(PipelineError::Dependency { needs: Stage::Filter, .. })));
    let summary = q.run(&[Stage::Filter, Stage::Assemble, Stage::Train, Stage::Generate, Stage::Rank, Stage::Report]).unwrap();
    assert_eq!(summary.ranked.len(), 2);
    for id in &summary.products {
        let m = q.manifest(id).unwrap();
        m.verify().unwrap();
        let names: Vec<&str> = m.records().iter().map(|r| r.stage_name.as_str()).collect();
        assert_eq!(names.first(), Some(&"ingest"));
        assert_eq!(names.last(), Some(&"report"));
    }
}

#[test]
fn product_directory_ingest_classifies_missing_category() {
    let dir = tempfile::tempdir().unwrap();
    let products = dir.path().join("catalogue");
    for (i, demo) in demo_products(2, 2, 48, 5).into_iter().enumerate() {
        let pdir = products.join(format!("sku-{i}"));
        std::fs::create_dir_all(&pdir).unwrap();
        let mut meta = BTreeMap::from([("title", demo.product.title.clone())]);
        if i == 0 {
            meta.insert("category", demo.product.category.clone());
        }
        std::fs::write(pdir.join("product.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        for (k, (_, raster)) in demo.images.iter().enumerate() {
            std::fs::write(pdir.join(format!("shot{k}.png")), raster.to_png().unwrap()).unwrap();
        }
    }
    let config = r#"{"backends": {"mock": true}, "products": {"dir": "catalogue"}, "bank": {"size": 6, "auto_approve": true}}"#;
    let p = Pipeline::new(parse_config(config, dir.path()).unwrap()).unwrap();
    let summary = p.run(&[Stage::Ingest]).unwrap();
    assert_eq!(summary.products, ["sku-0", "sku-1"]);
    let first = p.store().load_product("sku-0").unwrap();
    assert_eq!(first.category, "chair");
    assert_eq!(first.base_asset_ids.len(), 2);
    let second = p.store().load_product("sku-1").unwrap();
    assert!(!second.category.is_empty());

    std::fs::write(products.join("sku-1").join("product.json"), r#"{"title": "x", "colour": "red"}"#).unwrap();
    let err = p.run(&[Stage::Ingest]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("colour"), "{err}");
}

#[test]
fn ablation_grid_is_written_beside_the_main_spec() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "finetune": {"ablation_ranks": [16, 64], "ablation_steps": [900, 1800]}"#;
    let p = Pipeline::new(mock_config(dir.path(), extra)).unwrap();
    let summary = p.run(&Stage::ALL[..5]).unwrap();
    let m = p.manifest(&summary.products[0]).unwrap();
    let assembled = m.last_stage("assemble").unwrap();
    let grid = assembled.config_snapshot["ablation_specs"].as_array().unwrap();
    assert_eq!(grid.len(), 4);
    for rel in grid {
        assert!(dir.path().join("work").join(rel.as_str().unwrap()).is_file(), "{rel}");
    }
    let main = assembled.config_snapshot["spec_file"].as_str().unwrap();
    assert!(main.ends_with(".spec") && main.contains("train_spec_"));
}
