use crate::scene_io::Vocabulary;

use super::LabelError;

/// Norm below which a mean embedding is treated as cancelled out.
pub const MIN_MEAN_NORM: f64 = 1e-6;

/// Dense feature vector from the embedding provider.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Unit-norm copy, or `None` when the norm is below [`MIN_MEAN_NORM`].
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm();
        (n >= MIN_MEAN_NORM && n.is_finite()).then(|| Self(self.0.iter().map(|v| v / n).collect()))
    }
}

/// Mean of `vectors`, renormalized to unit length.
///
/// Each coordinate is summed in sorted order so the result does not depend on
/// the order of the inputs.
pub fn aggregate_embeddings(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, LabelError> {
    let first = vectors.first().ok_or(LabelError::EmptyEmbeddings)?;
    let dim = first.dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(LabelError::DimMismatch {
            expected: dim,
            actual: v.dim(),
        });
    }
    let n = vectors.len() as f64;
    let mut column = Vec::with_capacity(vectors.len());
    let mean: Vec<f64> = (0..dim)
        .map(|j| {
            column.clear();
            column.extend(vectors.iter().map(|v| v.0[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect();
    EmbeddingVector(mean)
        .normalized()
        .ok_or(LabelError::DegenerateMean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub class_index: usize,
    pub label: String,
    pub confidence: f64,
    /// Cosine similarity to every class, in vocabulary order.
    pub similarities: Vec<f64>,
}

/// Cosine similarity against each class embedding; the label is the argmax
/// (lowest index on ties) and the confidence is the softmax of
/// `similarity / temperature` at that class.
pub fn classify(
    query: &EmbeddingVector,
    vocab: &Vocabulary,
    temperature: f64,
) -> Result<Classification, LabelError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(LabelError::InvalidConfig(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if query.dim() != vocab.dim() {
        return Err(LabelError::DimMismatch {
            expected: vocab.dim(),
            actual: query.dim(),
        });
    }
    let qn = query.norm();
    if !(qn > 0.0) || !qn.is_finite() {
        return Err(LabelError::DegenerateMean);
    }
    let similarities: Vec<f64> = vocab
        .text_embeddings
        .iter()
        .map(|e| query.dot(e) / (qn * e.norm()))
        .collect();
    let mut best = 0;
    for (i, s) in similarities.iter().enumerate() {
        if *s > similarities[best] {
            best = i;
        }
    }
    let top = similarities[best] / temperature;
    let partition: f64 = similarities
        .iter()
        .map(|s| (s / temperature - top).exp())
        .sum();
    Ok(Classification {
        class_index: best,
        label: vocab.classes[best].clone(),
        confidence: 1.0 / partition,
        similarities,
    })
}
