//! Directed temporal session graphs: fused semantic and PEU node features,
//! PEU-difference edge attributes.

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::peu::{PeuTensor, PeuVector, COPING, NUM_CATEGORIES};
use crate::session::Session;

/// How raw PEU differences are scaled into edge attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeNorm {
    /// Halve the coping dim, the only one whose difference can reach ±2.
    #[default]
    Range,
    /// Scale the whole vector to unit length.
    L2,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionGraph {
    pub session_id: String,
    pub persona: usize,
    pub label: Option<u8>,
    pub text_dim: usize,
    /// T × text_dim, row-major.
    pub node_text: Vec<f32>,
    /// T × 8, row-major.
    pub node_peu: Vec<f32>,
    /// Chain edges (k, k+1).
    pub edges: Vec<(usize, usize)>,
    /// (T−1) × 8, row-major.
    pub edge_attr: Vec<f32>,
}

impl SessionGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_peu.len() / NUM_CATEGORIES
    }
}

pub fn raw_edge_diff(p: &PeuVector, next: &PeuVector) -> [f32; NUM_CATEGORIES] {
    let (a, b) = (p.as_f32(), next.as_f32());
    std::array::from_fn(|d| b[d] - a[d])
}

pub fn peu_edge_attr(p: &PeuVector, next: &PeuVector) -> [f32; NUM_CATEGORIES] {
    normalize_edge(raw_edge_diff(p, next), EdgeNorm::Range)
}

pub fn normalize_edge(mut e: [f32; NUM_CATEGORIES], norm: EdgeNorm) -> [f32; NUM_CATEGORIES] {
    match norm {
        EdgeNorm::Range => e[COPING] /= 2.0,
        EdgeNorm::L2 => {
            let n = e.iter().map(|x| x * x).sum::<f32>().sqrt();
            if n > 0.0 {
                e.iter_mut().for_each(|x| *x /= n);
            }
        }
        EdgeNorm::None => {}
    }
    e
}

pub fn build_graph(session: &Session, embeddings: &EmbeddingTable, peus: &PeuTensor, norm: EdgeNorm) -> Result<SessionGraph> {
    let t = session.len();
    if t == 0 {
        return Err(Error::EmptySession(session.id.clone()));
    }
    if peus.len() != t {
        return Err(Error::Data(format!(
            "session {}: {} PEU rows for {t} utterances",
            session.id,
            peus.len()
        )));
    }
    let mut node_text = Vec::with_capacity(t * embeddings.dim());
    for k in 0..t {
        node_text.extend_from_slice(embeddings.get(&session.id, k)?);
    }
    let edges: Vec<(usize, usize)> = (0..t - 1).map(|k| (k, k + 1)).collect();
    let edge_attr = edges
        .iter()
        .flat_map(|&(a, b)| normalize_edge(raw_edge_diff(&peus.rows[a], &peus.rows[b]), norm))
        .collect();
    Ok(SessionGraph {
        session_id: session.id.clone(),
        persona: session.persona,
        label: Some(session.label),
        text_dim: embeddings.dim(),
        node_text,
        node_peu: peus.to_f32(),
        edges,
        edge_attr,
    })
}

/// Builds graphs for every session, reading PEUs from the annotations.
pub fn build_graphs<'a>(
    sessions: impl IntoIterator<Item = &'a Session>,
    embeddings: &EmbeddingTable,
    norm: EdgeNorm,
) -> Result<Vec<SessionGraph>> {
    sessions
        .into_iter()
        .map(|s| build_graph(s, embeddings, &crate::peu::build_peu_tensor(s)?, norm))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peu::{build_peu_tensor, emit_annotations};
    use crate::session::{Source, Split, Utterance};
    use proptest::prelude::*;

    fn pv(v: [i8; 8]) -> PeuVector {
        PeuVector::from_values(v).unwrap()
    }

    fn session(rows: &[[i8; 8]]) -> (Session, EmbeddingTable) {
        let s = Session {
            id: "g".into(),
            persona: 2,
            label: 0,
            split: Split::Test,
            source: Source::Base,
            utterances: (0..rows.len())
                .map(|i| Utterance { i, q: "q".into(), a: format!("answer {i}") })
                .collect(),
            peus: rows.iter().enumerate().map(|(i, r)| emit_annotations(i, &pv(*r))).collect(),
            causes: vec![],
        };
        let table = EmbeddingTable::hashed(std::slice::from_ref(&s), 16, 0, true).unwrap();
        (s, table)
    }

    fn valid_peu() -> impl Strategy<Value = [i8; 8]> {
        (proptest::array::uniform7(0i8..=1), -1i8..=1).prop_map(|(b, c)| {
            let mut v = [0; 8];
            v[..7].copy_from_slice(&b);
            v[7] = c;
            v
        })
    }

    #[test]
    fn edge_attr_examples() {
        assert_eq!(
            peu_edge_attr(&pv([1, 0, 0, 0, 0, 0, 0, 1]), &pv([0, 0, 0, 0, 0, 0, 0, -1])),
            [-1., 0., 0., 0., 0., 0., 0., -1.]
        );
        let a = pv([0, 1, 1, 0, 0, 0, 1, -1]);
        assert_eq!(peu_edge_attr(&a, &a), [0.0; 8]);
        assert_eq!(
            peu_edge_attr(&PeuVector::zero(), &pv([0, 1, 0, 0, 1, 0, 0, 0])),
            [0., 1., 0., 0., 1., 0., 0., 0.]
        );
    }

    #[test]
    fn chain_shapes() {
        let (s, t) = session(&[[0; 8]]);
        let g = build_graph(&s, &t, &build_peu_tensor(&s).unwrap(), EdgeNorm::Range).unwrap();
        assert_eq!((g.num_nodes(), g.edges.len()), (1, 0));

        let (s, t) = session(&[[0; 8]; 4]);
        let g = build_graph(&s, &t, &build_peu_tensor(&s).unwrap(), EdgeNorm::Range).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 2), (2, 3)]);
        assert!(g.edge_attr.iter().all(|&x| x == 0.0));
        assert_eq!(g.node_text.len(), 4 * 16);
        assert_eq!(g.persona, 2);
    }

    #[test]
    fn empty_session_and_missing_embedding() {
        let (s, t) = session(&[]);
        assert!(matches!(
            build_graph(&s, &t, &PeuTensor::default(), EdgeNorm::Range),
            Err(Error::EmptySession(_))
        ));
        let (s, _) = session(&[[0; 8]; 2]);
        let err = build_graph(&s, &EmbeddingTable::new(16), &build_peu_tensor(&s).unwrap(), EdgeNorm::Range);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn build_is_pure() {
        let (s, t) = session(&[[1, 0, 0, 0, 0, 0, 0, 1], [0; 8], [0, 0, 1, 0, 0, 0, 0, -1]]);
        let p = build_peu_tensor(&s).unwrap();
        assert_eq!(
            build_graph(&s, &t, &p, EdgeNorm::Range).unwrap(),
            build_graph(&s, &t, &p, EdgeNorm::Range).unwrap()
        );
    }

    proptest! {
        #[test]
        fn antisymmetric_and_bounded(a in valid_peu(), b in valid_peu()) {
            let ab = peu_edge_attr(&pv(a), &pv(b));
            let ba = peu_edge_attr(&pv(b), &pv(a));
            for d in 0..8 {
                prop_assert_eq!(ab[d], -ba[d]);
                prop_assert!((-1.0..=1.0).contains(&ab[d]));
            }
            for norm in [EdgeNorm::L2, EdgeNorm::None] {
                let x = normalize_edge(raw_edge_diff(&pv(a), &pv(b)), norm);
                let y = normalize_edge(raw_edge_diff(&pv(b), &pv(a)), norm);
                prop_assert!(x.iter().zip(&y).all(|(p, q)| *p == -*q));
            }
        }

        #[test]
        fn raw_differences_telescope(rows in proptest::collection::vec(valid_peu(), 1..10)) {
            let mut total = [0.0f32; 8];
            for w in rows.windows(2) {
                let e = raw_edge_diff(&pv(w[0]), &pv(w[1]));
                total.iter_mut().zip(e).for_each(|(t, x)| *t += x);
            }
            let (first, last) = (pv(rows[0]).as_f32(), pv(*rows.last().unwrap()).as_f32());
            for d in 0..8 {
                prop_assert_eq!(total[d], last[d] - first[d]);
            }
        }

        #[test]
        fn graph_invariants(rows in proptest::collection::vec(valid_peu(), 1..12)) {
            let (s, t) = session(&rows);
            let g = build_graph(&s, &t, &build_peu_tensor(&s).unwrap(), EdgeNorm::Range).unwrap();
            prop_assert_eq!(g.edges.len(), rows.len() - 1);
            for (k, &(a, b)) in g.edges.iter().enumerate() {
                prop_assert_eq!((a, b), (k, k + 1));
            }
            prop_assert!(g.edge_attr.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
