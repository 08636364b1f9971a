use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::autoencoder::MaskAutoencoder;
use super::kmeans::{kmeans, squared_distance, KMeansInit, MAX_ITERATIONS};
use crate::archive::{read_archive, write_archive};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mask::{crop_and_resize, resize_mask, Mask};
use crate::nn::Param;
use crate::types::{CategoryId, MASK_SIZE};

pub const CODEBOOK_MAGIC: &[u8; 8] = b"AMODALCB";
pub const CODEBOOK_VERSION: u32 = 1;

/// Norm behind [`ShapeCodebook::shape_similarity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityNorm {
    /// `1 − ‖p − q‖₁ / (H·W)`.
    #[default]
    L1,
    /// `1 − ‖p − q‖₂ / √(H·W)`.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMeta {
    pub masks: usize,
    /// Requested `K`, lowered to the mask count when fewer masks exist.
    pub k: usize,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookMeta {
    pub dim: usize,
    pub k_requested: usize,
    pub seed: u64,
    pub categories: BTreeMap<CategoryId, CategoryMeta>,
}

/// One retrieved prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatch {
    pub centroid: usize,
    /// Euclidean distance in embedding space.
    pub distance: f64,
    pub mask: Mask,
}

/// Per-category centroids over autoencoder embeddings of amodal masks.
/// Immutable once built; the decoded centroid masks are cached.
#[derive(Debug, Clone)]
pub struct ShapeCodebook {
    autoencoder: MaskAutoencoder,
    centroids: BTreeMap<CategoryId, Vec<Vec<f64>>>,
    decoded: BTreeMap<CategoryId, Vec<Mask>>,
    meta: CodebookMeta,
    norm: SimilarityNorm,
}

/// Amodal ground truth of every instance, cropped to its box and resampled
/// to the mask-head resolution, grouped by category.
pub fn amodal_shape_masks(dataset: &Dataset) -> BTreeMap<CategoryId, Vec<Mask>> {
    let mut out: BTreeMap<CategoryId, Vec<Mask>> = dataset.category_ids().into_iter().map(|c| (c, Vec::new())).collect();
    for (_, a) in dataset.instances() {
        let m = crop_and_resize(&a.amodal_mask, &a.bbox, (MASK_SIZE, MASK_SIZE)).binarize();
        out.entry(a.category_id).or_default().push(m);
    }
    out
}

fn decode_all(ae: &MaskAutoencoder, centroids: &BTreeMap<CategoryId, Vec<Vec<f64>>>) -> Result<BTreeMap<CategoryId, Vec<Mask>>> {
    centroids
        .iter()
        .map(|(&c, cs)| Ok((c, cs.iter().map(|z| ae.decode(z)).collect::<Result<Vec<_>>>()?)))
        .collect()
}

/// Encodes each category's masks and clusters the embeddings.
pub fn build_codebook(
    autoencoder: MaskAutoencoder,
    masks: &BTreeMap<CategoryId, Vec<Mask>>,
    k: usize,
    seed: u64,
) -> Result<ShapeCodebook> {
    if k == 0 {
        return Err(Error::Build("K must be positive".into()));
    }
    let built: Vec<(CategoryId, Vec<Vec<f64>>, CategoryMeta)> = masks
        .par_iter()
        .map(|(&cat, ms)| {
            if ms.is_empty() {
                return Err(Error::Build(format!("category {cat} has no masks")));
            }
            let emb = ms.iter().map(|m| autoencoder.encode(m)).collect::<Result<Vec<_>>>()?;
            let k_used = k.min(emb.len());
            let r = kmeans(&emb, k_used, KMeansInit::PlusPlus { seed: seed ^ u64::from(cat) }, MAX_ITERATIONS)?;
            let meta = CategoryMeta {
                masks: ms.len(),
                k: k_used,
                iterations: r.iterations,
                converged: r.converged,
                objective: r.objective(),
            };
            Ok((cat, r.centroids, meta))
        })
        .collect::<Result<_>>()?;
    let mut centroids = BTreeMap::new();
    let mut categories = BTreeMap::new();
    for (cat, c, m) in built {
        if m.k < k {
            log::warn!("category {cat}: only {} masks, K lowered from {k} to {}", m.masks, m.k);
        }
        centroids.insert(cat, c);
        categories.insert(cat, m);
    }
    let decoded = decode_all(&autoencoder, &centroids)?;
    let meta = CodebookMeta { dim: autoencoder.dim(), k_requested: k, seed, categories };
    Ok(ShapeCodebook { autoencoder, centroids, decoded, meta, norm: SimilarityNorm::L1 })
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CodebookMeta,
    norm: SimilarityNorm,
}

impl ShapeCodebook {
    pub fn meta(&self) -> &CodebookMeta {
        &self.meta
    }

    pub fn autoencoder(&self) -> &MaskAutoencoder {
        &self.autoencoder
    }

    pub fn norm(&self) -> SimilarityNorm {
        self.norm
    }

    pub fn with_norm(mut self, norm: SimilarityNorm) -> Self {
        self.norm = norm;
        self
    }

    pub fn categories(&self) -> Vec<CategoryId> {
        self.centroids.keys().copied().collect()
    }

    pub fn centroids(&self, category: CategoryId) -> Result<&[Vec<f64>]> {
        self.centroids.get(&category).map(Vec::as_slice).ok_or(Error::UnknownCategory(category))
    }

    /// Hash over the bit patterns of every stored centroid.
    pub fn storage_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (cat, cs) in &self.centroids {
            cat.hash(&mut h);
            for v in cs.iter().flatten() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// The `k` nearest centroids to `m`'s embedding, ascending by distance
    /// with ties to the lower centroid index, each decoded to a mask.
    pub fn search(&self, m: &Mask, category: CategoryId, k: usize) -> Result<Vec<PriorMatch>> {
        let cs = self.centroids(category)?;
        if k == 0 || k > cs.len() {
            return Err(Error::Build(format!("k = {k} but category {category} has {} centroids", cs.len())));
        }
        let query = if m.resolution() == (MASK_SIZE, MASK_SIZE) { m.clone() } else { resize_mask(m, (MASK_SIZE, MASK_SIZE)) };
        let z = self.autoencoder.encode(&query)?;
        let mut order: Vec<(usize, f64)> = cs.iter().enumerate().map(|(i, c)| (i, squared_distance(&z, c))).collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let decoded = &self.decoded[&category];
        Ok(order
            .into_iter()
            .take(k)
            .map(|(i, d2)| PriorMatch { centroid: i, distance: d2.sqrt(), mask: decoded[i].clone() })
            .collect())
    }

    /// `M_sp^k = f_sp(m)`.
    pub fn shape_prior_search(&self, m: &Mask, category: CategoryId, k: usize) -> Result<Vec<Mask>> {
        Ok(self.search(m, category, k)?.into_iter().map(|p| p.mask).collect())
    }

    /// Similarity in `[0, 1]` between `pred` and its nearest decoded prior.
    pub fn shape_similarity(&self, pred: &Mask, category: CategoryId) -> Result<f64> {
        let pred = if pred.resolution() == (MASK_SIZE, MASK_SIZE) {
            pred.clone()
        } else {
            resize_mask(pred, (MASK_SIZE, MASK_SIZE))
        };
        let nearest = self.search(&pred, category, 1)?.remove(0).mask;
        Ok(mask_similarity(&pred, &nearest, self.norm))
    }

    /// 2-D PCA projection of a category's centroids.
    pub fn project_codebook(&self, category: CategoryId) -> Result<Vec<(f64, f64)>> {
        Ok(pca_2d(self.centroids(category)?))
    }

    /// Writes the projection as a scatter PNG and an `index,x,y` CSV.
    pub fn write_projection(&self, category: CategoryId, png: &Path, csv: &Path) -> Result<Vec<(f64, f64)>> {
        let points = self.project_codebook(category)?;
        scatter_plot(&points).save(png)?;
        let mut w = BufWriter::new(File::create(csv)?);
        writeln!(w, "index,x,y")?;
        for (i, (x, y)) in points.iter().enumerate() {
            writeln!(w, "{i},{x},{y}")?;
        }
        w.flush()?;
        Ok(points)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<Param> = self.autoencoder.store.params().to_vec();
        for (cat, cs) in &self.centroids {
            arrays.push(Param {
                name: format!("centroids.{cat}"),
                shape: vec![cs.len(), self.meta.dim],
                data: cs.iter().flatten().copied().collect(),
            });
        }
        let header = Header { meta: self.meta.clone(), norm: self.norm };
        write_archive(BufWriter::new(File::create(path)?), CODEBOOK_MAGIC, CODEBOOK_VERSION, &header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive::<_, Header>(BufReader::new(File::open(path)?), CODEBOOK_MAGIC, CODEBOOK_VERSION)?;
        let Header { meta, norm } = archive.header;
        let (cent, ae_params): (Vec<Param>, Vec<Param>) =
            archive.arrays.into_iter().partition(|p| p.name.starts_with("centroids."));
        let mut autoencoder = MaskAutoencoder::new(meta.dim, 0)?;
        autoencoder.store.load_from(&ae_params)?;
        let mut centroids = BTreeMap::new();
        for p in cent {
            let cat: CategoryId = p.name["centroids.".len()..]
                .parse()
                .map_err(|_| Error::Archive(format!("bad centroid array name {}", p.name)))?;
            if p.shape.len() != 2 || p.shape[1] != meta.dim || !meta.categories.contains_key(&cat) {
                return Err(Error::Archive(format!("centroid array {} has shape {:?}", p.name, p.shape)));
            }
            centroids.insert(cat, p.data.chunks(meta.dim).map(<[f64]>::to_vec).collect());
        }
        if centroids.len() != meta.categories.len() {
            return Err(Error::Archive("centroid arrays do not match the category list".into()));
        }
        let decoded = decode_all(&autoencoder, &centroids)?;
        Ok(Self { autoencoder, centroids, decoded, meta, norm })
    }
}

pub fn mask_similarity(p: &Mask, q: &Mask, norm: SimilarityNorm) -> f64 {
    let n = p.data().len() as f64;
    let diffs = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs());
    let s = match norm {
        SimilarityNorm::L1 => 1.0 - diffs.sum::<f64>() / n,
        SimilarityNorm::L2 => 1.0 - (diffs.map(|d| d * d).sum::<f64>() / n).sqrt(),
    };
    s.clamp(0.0, 1.0)
}

/// Centered PCA onto the two leading principal axes. Each axis is signed so
/// its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let eig = SymmetricEigen::new(x.transpose() * &x / n as f64);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |r: usize| -> Option<Vec<f64>> {
        let col = eig.eigenvectors.column(*order.get(r)?);
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        Some(col.iter().map(|v| v * sign).collect())
    };
    let (a0, a1) = (axis(0), axis(1));
    let proj = |row: usize, a: &Option<Vec<f64>>| a.as_ref().map_or(0.0, |a| (0..d).map(|j| x[(row, j)] * a[j]).sum());
    (0..n).map(|i| (proj(i, &a0), proj(i, &a1))).collect()
}

const PLOT_SIZE: u32 = 256;
const PLOT_MARGIN: f64 = 16.0;

fn scatter_plot(points: &[(f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_SIZE, PLOT_SIZE, Rgb([255, 255, 255]));
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for &(x, y) in points {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-12);
    let usable = PLOT_SIZE as f64 - 2.0 * PLOT_MARGIN;
    for &(x, y) in points {
        let px = PLOT_MARGIN + (x - lo.0) / span * usable;
        let py = PLOT_SIZE as f64 - PLOT_MARGIN - (y - lo.1) / span * usable;
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                let (u, v) = (px as i64 + dx, py as i64 + dy);
                if (0..PLOT_SIZE as i64).contains(&u) && (0..PLOT_SIZE as i64).contains(&v) {
                    img.put_pixel(u as u32, v as u32, Rgb([30, 90, 200]));
                }
            }
        }
    }
    img
}
