//! Report artifacts: metrics.json, ablation tables (CSV + JSON), and raw
//! embedding dumps for external projection tooling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::lifelong::AblationEntry;
use crate::reid::{extract_features, ReidModel};
use crate::synthbench::{DomainDataset, MetricsReport, Split};

/// Serializes the report with a stable field order so identical runs produce
/// byte-identical files.
pub fn write_metrics_json(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(serde_json::to_string_pretty(report)?.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_ablation_table(
    entries: &[AblationEntry],
    csv_path: &Path,
    json_path: &Path,
) -> Result<()> {
    let mut csv = BufWriter::new(File::create(csv_path)?);
    writeln!(
        csv,
        "label,seen_avg_map,seen_avg_r1,unseen_avg_map,unseen_avg_r1"
    )?;
    for e in entries {
        writeln!(
            csv,
            "{},{},{},{},{}",
            e.label, e.seen_avg.map, e.seen_avg.rank1, e.unseen_avg.map, e.unseen_avg.rank1
        )?;
    }
    csv.flush()?;

    let mut json = BufWriter::new(File::create(json_path)?);
    json.write_all(serde_json::to_string_pretty(entries)?.as_bytes())?;
    json.write_all(b"\n")?;
    Ok(())
}

/// Dumps final-model embeddings of every evaluation image as CSV rows:
/// domain, role, split, identity, then the feature columns.
pub fn write_embeddings_csv(
    model: &ReidModel,
    seen: &[DomainDataset],
    unseen: &[DomainDataset],
    path: &Path,
) -> Result<()> {
    let dim = model.extractor.embed_dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "domain,role,split,identity")?;
    for i in 0..dim {
        write!(out, ",f{i}")?;
    }
    writeln!(out)?;

    for (role, datasets) in [("seen", seen), ("unseen", unseen)] {
        for ds in datasets {
            for split in [Split::Query, Split::Gallery] {
                let (images, labels) = ds.images_of(split);
                if images.is_empty() {
                    continue;
                }
                let fb = extract_features(model, &images, &labels)?;
                let split_name = match split {
                    Split::Query => "query",
                    Split::Gallery => "gallery",
                    Split::Train => "train",
                };
                for (row, &label) in (0..fb.len()).zip(fb.labels()) {
                    write!(out, "{},{},{},{}", ds.domain_id, role, split_name, label)?;
                    for v in fb.row(row) {
                        write!(out, ",{v}")?;
                    }
                    writeln!(out)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}
