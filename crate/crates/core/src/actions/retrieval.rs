use std::sync::{Arc, Mutex};

use crate::llm::{EmbeddingVector, LlmClient, LlmError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub source: String,
    /// Position of the chunk within its source document.
    pub ordinal: usize,
    pub text: String,
}

/// Splits text into windows of `size` characters, consecutive windows
/// sharing `overlap` characters. The last window ends at the end of the text.
pub fn chunk_text(text: &str, size: usize, overlap: usize) -> Vec<String> {
    assert!(size > 0 && overlap < size, "invalid chunking parameters");
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    let stride = size - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(chars.len());
        out.push(chars[start..end].iter().collect());
        if end == chars.len() {
            break;
        }
        start += stride;
    }
    out
}

/// Document chunks with lazily computed embeddings.
pub struct RetrievalIndex {
    chunks: Vec<Chunk>,
    embeddings: Mutex<Option<Arc<Vec<EmbeddingVector>>>>,
}

impl RetrievalIndex {
    pub fn new(documents: &[(String, String)], chunk_size: usize, overlap: usize) -> Self {
        let chunks = documents
            .iter()
            .flat_map(|(source, text)| {
                chunk_text(text, chunk_size, overlap)
                    .into_iter()
                    .enumerate()
                    .map(move |(ordinal, text)| Chunk { source: source.clone(), ordinal, text })
            })
            .filter(|c| !c.text.trim().is_empty())
            .collect();
        Self { chunks, embeddings: Mutex::new(None) }
    }

    pub fn from_chunks(chunks: Vec<Chunk>) -> Self {
        Self { chunks, embeddings: Mutex::new(None) }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Chunk embeddings, computed on first use and cached.
    pub fn embeddings(&self, llm: &LlmClient) -> Result<Arc<Vec<EmbeddingVector>>, LlmError> {
        let mut guard = self.embeddings.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(cached) = guard.as_ref() {
            return Ok(cached.clone());
        }
        let vectors = self.chunks.iter().map(|c| llm.embed(&c.text)).collect::<Result<Vec<_>, _>>()?;
        let vectors = Arc::new(vectors);
        *guard = Some(vectors.clone());
        Ok(vectors)
    }

    /// Indices and cosine scores of the `k` chunks most similar to `query`,
    /// best first; ties keep document order.
    pub fn search(&self, query: &str, k: usize, llm: &LlmClient) -> Result<Vec<(usize, f64)>, LlmError> {
        let embeddings = self.embeddings(llm)?;
        let q = llm.embed(query)?;
        let mut scored: Vec<(usize, f64)> = embeddings.iter().enumerate().map(|(i, e)| (i, q.cosine(e))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn render(&self, hits: &[(usize, f64)]) -> String {
        hits.iter()
            .map(|&(i, _)| {
                let c = &self.chunks[i];
                format!("[source: {}, chunk {}]\n{}", c.source, c.ordinal, c.text.trim())
            })
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}
