//! Picks the donor category whose name is semantically closest to the base
//! image's caption, by cosine similarity of text embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use base64::Engine;
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Captioner, TextEmbedder};
use crate::error::{Error, Result};
use crate::gallery::GalleryIndex;
use crate::seed::rng_from_seed;
use crate::types::{Caption, EmbeddingVector};

pub const EMBEDDING_CACHE_MAGIC: &str = "CACP-EMB v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub base_caption: Caption,
    /// Descending by score, ties broken by category name.
    pub ranking: Vec<SimilarityScore>,
    pub chosen: String,
}

impl MatchResult {
    /// Uniform choice among the `k` best categories (`k = 1` is the argmax).
    pub fn choose_top_k(&self, k: usize, seed: u64) -> &str {
        let k = k.clamp(1, self.ranking.len());
        if k == 1 {
            return &self.chosen;
        }
        let mut rng = rng_from_seed(seed);
        &self.ranking[rng.random_range(0..k)].category
    }
}

/// Text fed to the embedder for a category folder name.
pub fn category_text(category: &str) -> String {
    category.to_lowercase().replace('_', " ")
}

pub fn similarity(
    caption: &Caption,
    category: &str,
    embedder: &dyn TextEmbedder,
) -> Result<SimilarityScore> {
    let text = category_text(category);
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let a = embedder.embed(caption.as_str())?;
    let b = embedder.embed(&text)?;
    Ok(SimilarityScore {
        category: category.to_string(),
        score: a.cosine(&b)?,
    })
}

/// Embeddings of every gallery category, computed once per run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryEmbeddings {
    vectors: BTreeMap<String, EmbeddingVector>,
}

impl CategoryEmbeddings {
    pub fn build<S: AsRef<str>>(categories: &[S], embedder: &dyn TextEmbedder) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        for category in categories {
            let category = category.as_ref();
            vectors.insert(
                category.to_string(),
                embedder.embed(&category_text(category))?,
            );
        }
        Ok(CategoryEmbeddings { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, category: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(category)
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.values().next().map(EmbeddingVector::dim)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Ranks every cached category against an already-embedded caption.
    pub fn rank(&self, caption: Caption, caption_vector: &EmbeddingVector) -> Result<MatchResult> {
        if self.vectors.is_empty() {
            return Err(Error::InvalidInput("no categories to match against".into()));
        }
        let mut ranking = self
            .vectors
            .iter()
            .map(|(category, v)| {
                Ok(SimilarityScore {
                    category: category.clone(),
                    score: caption_vector.cosine(v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ranking.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.category.cmp(&b.category))
        });
        let chosen = ranking[0].category.clone();
        Ok(MatchResult {
            base_caption: caption,
            ranking,
            chosen,
        })
    }

    pub fn to_cache_string(&self) -> String {
        let engine = base64::engine::general_purpose::STANDARD;
        let mut out = format!("{EMBEDDING_CACHE_MAGIC} dim={}\n", self.dim().unwrap_or(0));
        for (category, v) in &self.vectors {
            let bytes: Vec<u8> = v.values().iter().flat_map(|f| f.to_le_bytes()).collect();
            let _ = writeln!(out, "{category}\t{}", engine.encode(bytes));
        }
        out
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let dim: usize = header
            .strip_prefix(EMBEDDING_CACHE_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("dim="))
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| {
                Error::malformed(
                    path,
                    format!("expected `{EMBEDDING_CACHE_MAGIC} dim=<d>` header"),
                )
            })?;
        let engine = base64::engine::general_purpose::STANDARD;
        let mut vectors = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 2;
            let (category, encoded) = line.split_once('\t').ok_or_else(|| {
                Error::malformed(
                    path,
                    format!("line {lineno}: expected `category<TAB>base64`"),
                )
            })?;
            let bytes = engine
                .decode(encoded)
                .map_err(|e| Error::malformed(path, format!("line {lineno}: {e}")))?;
            if bytes.len() != dim * 4 {
                return Err(Error::malformed(
                    path,
                    format!("line {lineno}: {} bytes, expected {}", bytes.len(), dim * 4),
                ));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            let vector = EmbeddingVector::new(values)
                .map_err(|e| Error::malformed(path, format!("line {lineno}: {e}")))?;
            vectors.insert(category.to_string(), vector);
        }
        Ok(CategoryEmbeddings { vectors })
    }
}

pub fn embed_categories(
    index: &GalleryIndex,
    embedder: &dyn TextEmbedder,
) -> Result<CategoryEmbeddings> {
    CategoryEmbeddings::build(index.categories(), embedder)
}

/// Captions the base image and ranks the cached categories against it.
pub fn match_with_cache(
    base_image: &RgbImage,
    cache: &CategoryEmbeddings,
    captioner: &dyn Captioner,
    embedder: &dyn TextEmbedder,
) -> Result<MatchResult> {
    let caption = captioner.caption(base_image)?;
    let vector = embedder.embed(caption.as_str())?;
    cache.rank(caption, &vector)
}

pub fn match_category(
    base_image: &RgbImage,
    index: &GalleryIndex,
    captioner: &dyn Captioner,
    embedder: &dyn TextEmbedder,
) -> Result<MatchResult> {
    if index.categories().is_empty() {
        return Err(Error::EmptyGallery(index.root().to_path_buf()));
    }
    let cache = embed_categories(index, embedder)?;
    match_with_cache(base_image, &cache, captioner, embedder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{FakeCaptioner, FakeEmbedder};

    fn unit(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn identical_strings_score_one() {
        let embedder = FakeEmbedder::new(32);
        let s = similarity(&Caption::new("soccer").unwrap(), "soccer", &embedder).unwrap();
        assert!((s.score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn planted_orthogonal_vectors_score_zero() {
        let embedder = FakeEmbedder::new(4)
            .with_vector("a dog", unit(4, 0))
            .unwrap()
            .with_vector("cat", unit(4, 1))
            .unwrap();
        let s = similarity(&Caption::new("a dog").unwrap(), "cat", &embedder).unwrap();
        assert!(s.score.abs() < 1e-6);
    }

    #[test]
    fn category_text_normalization() {
        assert_eq!(category_text("Traffic_Cone"), "traffic cone");
    }

    #[test]
    fn ranking_ties_are_lexicographic() {
        let embedder = FakeEmbedder::new(2)
            .with_vector("caption", vec![1.0, 0.0])
            .unwrap()
            .with_vector("beta", vec![1.0, 1.0])
            .unwrap()
            .with_vector("alpha", vec![1.0, -1.0])
            .unwrap();
        let cache = CategoryEmbeddings::build(&["beta", "alpha"], &embedder).unwrap();
        let caption = Caption::new("caption").unwrap();
        let result = cache
            .rank(caption.clone(), &embedder.embed("caption").unwrap())
            .unwrap();
        assert_eq!(result.chosen, "alpha");
        assert_eq!(result.ranking[1].category, "beta");
        assert_eq!(result.choose_top_k(1, 3), "alpha");
    }

    #[test]
    fn cache_file_round_trip() {
        let embedder = FakeEmbedder::new(16);
        let cache = CategoryEmbeddings::build(&["dog", "traffic_light"], &embedder).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        cache.write_cache(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("CACP-EMB v1 dim=16\n"));
        assert_eq!(CategoryEmbeddings::read_cache(&path).unwrap(), cache);
    }

    #[test]
    fn empty_category_list_gives_empty_cache() {
        let embedder = FakeEmbedder::new(8);
        let cache = CategoryEmbeddings::build::<&str>(&[], &embedder).unwrap();
        assert!(cache.is_empty());
        assert_eq!(embedder.calls(), 0);
    }

    #[test]
    fn single_category_always_chosen() {
        let embedder = FakeEmbedder::new(8);
        let cache = CategoryEmbeddings::build(&["zebra"], &embedder).unwrap();
        let image = RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
        let result = match_with_cache(&image, &cache, &FakeCaptioner::new(), &embedder).unwrap();
        assert_eq!(result.chosen, "zebra");
        assert_eq!(result.ranking.len(), 1);
    }
}
