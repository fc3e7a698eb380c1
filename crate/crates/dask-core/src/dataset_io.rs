//! Benchmark generation and on-disk persistence: a directory of PPM files
//! plus a JSON manifest mapping each file to (role, domain, identity, split).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::image::{read_ppm, write_ppm, Image};
use crate::rng::derive_seed;
use crate::synthbench::{generate_domain, DomainDataset, DomainStyle, Split};

pub struct BenchmarkData {
    pub seen: Vec<DomainDataset>,
    pub unseen: Vec<DomainDataset>,
}

/// Generates the full benchmark: T seen domains and U unseen domains with
/// styles and contents derived deterministically from the seed.
pub fn generate_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<BenchmarkData> {
    cfg.validate()?;
    let build = |role: &str, count: usize, stratified: bool| -> Result<Vec<DomainDataset>> {
        (0..count)
            .map(|i| {
                let style_seed = derive_seed(seed, &format!("{role}-style"), i as u64);
                let data_seed = derive_seed(seed, &format!("{role}-data"), i as u64);
                // Seen domains get stratified styles so consecutive training
                // steps always face a wide gap; unseen domains are free draws.
                let style = if stratified {
                    DomainStyle::stratified(style_seed, i)
                } else {
                    DomainStyle::from_seed(style_seed)
                };
                let mut ds = generate_domain(
                    data_seed,
                    &style,
                    cfg.ids_per_domain,
                    cfg.views_per_id,
                    cfg.image_height,
                    cfg.image_width,
                )?;
                ds.domain_id = i;
                Ok(ds)
            })
            .collect()
    };
    Ok(BenchmarkData {
        seen: build("seen", cfg.seen_domains, true)?,
        unseen: build("unseen", cfg.unseen_domains, false)?,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestImage {
    file: String,
    role: String,
    domain: usize,
    identity: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_height: usize,
    image_width: usize,
    images: Vec<ManifestImage>,
}

pub fn save_benchmark(data: &BenchmarkData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        image_height: 0,
        image_width: 0,
        images: Vec::new(),
    };
    for (role, datasets) in [("seen", &data.seen), ("unseen", &data.unseen)] {
        for ds in datasets {
            let sub = format!("{role}_{}", ds.domain_id);
            fs::create_dir_all(dir.join(&sub))?;
            for (i, img) in ds.images.iter().enumerate() {
                let file = format!("{sub}/img_{i:04}.ppm");
                write_ppm(img, &dir.join(&file))?;
                manifest.image_height = img.height();
                manifest.image_width = img.width();
                manifest.images.push(ManifestImage {
                    file,
                    role: role.into(),
                    domain: ds.domain_id,
                    identity: ds.labels[i],
                    split: ds.splits[i],
                });
            }
        }
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_benchmark(dir: &Path) -> Result<BenchmarkData> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::DataFormat(format!("manifest.json: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::DataFormat(format!("manifest.json: {e}")))?;

    let mut seen: Vec<DomainDataset> = Vec::new();
    let mut unseen: Vec<DomainDataset> = Vec::new();
    for entry in &manifest.images {
        let image = read_ppm(&dir.join(&entry.file))?;
        let list = match entry.role.as_str() {
            "seen" => &mut seen,
            "unseen" => &mut unseen,
            other => {
                return Err(Error::DataFormat(format!("unknown role '{other}'")));
            }
        };
        while list.len() <= entry.domain {
            list.push(DomainDataset {
                domain_id: list.len(),
                images: Vec::new(),
                labels: Vec::new(),
                splits: Vec::new(),
            });
        }
        let ds = &mut list[entry.domain];
        ds.images.push(image);
        ds.labels.push(entry.identity);
        ds.splits.push(entry.split);
    }
    for ds in seen.iter().chain(&unseen) {
        ds.validate()?;
        if ds.images.is_empty() {
            return Err(Error::DataFormat(format!(
                "domain {} has no images",
                ds.domain_id
            )));
        }
    }
    if seen.is_empty() {
        return Err(Error::DataFormat("no seen domains in manifest".into()));
    }
    Ok(BenchmarkData { seen, unseen })
}

/// In-memory equality check used by round-trip tests: pixels are quantized to
/// 8 bits on disk, so loaded datasets match saved ones only to 1/255.
pub fn images_close(a: &Image, b: &Image, tol: f64) -> bool {
    a.height() == b.height()
        && a.width() == b.width()
        && a.pixels()
            .iter()
            .zip(b.pixels())
            .all(|(x, y)| (x - y).abs() <= tol)
}
