//! A rooted category taxonomy with Wu-Palmer similarity and free-text answer
//! grounding.
//!
//! Taxonomies load from a plain-text edge list (`child<TAB>parent`, one edge
//! per line) so any hypernym source can be used without a lexical-database
//! dependency.

use std::collections::BTreeMap;

use crate::coco::normalize_category_name;

use super::EvalError;

/// A single-rooted tree of category terms. `depth(root) == 1`.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    names: Vec<String>,
    ids: BTreeMap<String, usize>,
    parent: Vec<Option<usize>>,
    depth: Vec<u32>,
    root: usize,
}

impl Taxonomy {
    /// Build from `(child, parent)` pairs. Names are normalized the same way
    /// category names are, so taxonomy terms and dataset categories agree on
    /// surface form.
    pub fn from_edges<I>(edges: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut names: Vec<String> = Vec::new();
        let mut intern = |name: &str, names: &mut Vec<String>| -> usize {
            let normalized = normalize_category_name(name);
            *ids.entry(normalized.clone()).or_insert_with(|| {
                names.push(normalized);
                names.len() - 1
            })
        };

        let mut parent_of: BTreeMap<usize, usize> = BTreeMap::new();
        for (child, parent) in edges {
            let child_id = intern(&child, &mut names);
            let parent_id = intern(&parent, &mut names);
            if child_id == parent_id {
                return Err(EvalError::InvalidTaxonomy(format!(
                    "self-edge on {:?}",
                    names[child_id]
                )));
            }
            if let Some(&existing) = parent_of.get(&child_id) {
                if existing != parent_id {
                    return Err(EvalError::InvalidTaxonomy(format!(
                        "{:?} has two parents: {:?} and {:?}",
                        names[child_id], names[existing], names[parent_id]
                    )));
                }
                continue;
            }
            parent_of.insert(child_id, parent_id);
        }

        if names.is_empty() {
            return Err(EvalError::InvalidTaxonomy("no edges".to_string()));
        }

        let roots: Vec<usize> = (0..names.len())
            .filter(|id| !parent_of.contains_key(id))
            .collect();
        if roots.len() != 1 {
            let named: Vec<&str> = roots.iter().map(|&id| names[id].as_str()).collect();
            return Err(EvalError::InvalidTaxonomy(format!(
                "expected exactly one root, found {}: {named:?}",
                roots.len()
            )));
        }
        let root = roots[0];

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
        for (&child, &parent) in &parent_of {
            children[parent].push(child);
        }

        let mut depth = vec![0u32; names.len()];
        let mut queue = std::collections::VecDeque::from([root]);
        depth[root] = 1;
        let mut reached = 0usize;
        while let Some(node) = queue.pop_front() {
            reached += 1;
            for &child in &children[node] {
                depth[child] = depth[node] + 1;
                queue.push_back(child);
            }
        }
        if reached != names.len() {
            return Err(EvalError::InvalidTaxonomy(
                "taxonomy contains a cycle or a node unreachable from the root".to_string(),
            ));
        }

        let parent = (0..names.len())
            .map(|id| parent_of.get(&id).copied())
            .collect();
        Ok(Taxonomy {
            names,
            ids,
            parent,
            depth,
            root,
        })
    }

    /// Parse a `child<TAB>parent` edge list. Blank lines and `#` comment
    /// lines are skipped.
    pub fn from_edge_list(text: &str) -> Result<Self, EvalError> {
        let mut edges = Vec::new();
        for (number, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((child, parent)) = line.split_once('\t') else {
                return Err(EvalError::InvalidTaxonomy(format!(
                    "line {}: expected child<TAB>parent, got {line:?}",
                    number + 1
                )));
            };
            edges.push((child.to_string(), parent.to_string()));
        }
        Taxonomy::from_edges(edges)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(&normalize_category_name(name))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.names[self.root]
    }

    /// Depth of a node, with the root at depth 1.
    pub fn depth(&self, name: &str) -> Option<u32> {
        self.ids
            .get(&normalize_category_name(name))
            .map(|&id| self.depth[id])
    }

    fn id_of(&self, name: &str) -> Result<usize, EvalError> {
        self.ids
            .get(&normalize_category_name(name))
            .copied()
            .ok_or_else(|| EvalError::UnknownTerm(name.to_string()))
    }

    fn ancestor_chain(&self, mut id: usize) -> Vec<usize> {
        let mut chain = vec![id];
        while let Some(parent) = self.parent[id] {
            chain.push(parent);
            id = parent;
        }
        chain
    }

    /// Wu-Palmer similarity: `2 * depth(lcs) / (depth(a) + depth(b))`, where
    /// lcs is the deepest common ancestor.
    pub fn wup(&self, a: &str, b: &str) -> Result<f64, EvalError> {
        let a = self.id_of(a)?;
        let b = self.id_of(b)?;
        let a_chain = self.ancestor_chain(a);
        // Walking up from b visits ancestors deepest-first, so the first one
        // shared with a's chain is the deepest common ancestor.
        let mut cursor = b;
        let lcs = loop {
            if a_chain.contains(&cursor) {
                break cursor;
            }
            cursor = self.parent[cursor].expect("chains meet at the root");
        };
        Ok(2.0 * self.depth[lcs] as f64 / (self.depth[a] as f64 + self.depth[b] as f64))
    }

    /// Ground a free-text answer to a taxonomy node: normalize, try the whole
    /// answer (singularizing a trailing `s`), then fall back to the longest
    /// matching token. `None` means no match and scores zero downstream.
    pub fn answer_to_node(&self, answer: &str) -> Option<&str> {
        let normalized = normalize_answer(answer);
        if normalized.is_empty() {
            return None;
        }
        if let Some(&id) = self.ids.get(&normalized) {
            return Some(&self.names[id]);
        }
        if let Some(singular) = normalized.strip_suffix('s') {
            if let Some(&id) = self.ids.get(singular) {
                return Some(&self.names[id]);
            }
        }
        let mut best: Option<(usize, usize)> = None; // (node id, token length)
        for token in normalized.split(' ') {
            let id = self.ids.get(token).copied().or_else(|| {
                token
                    .strip_suffix('s')
                    .and_then(|singular| self.ids.get(singular).copied())
            });
            if let Some(id) = id {
                let better = match best {
                    Some((_, len)) => token.len() > len,
                    None => true,
                };
                if better {
                    best = Some((id, token.len()));
                }
            }
        }
        best.map(|(id, _)| self.names[id].as_str())
    }
}

/// Lowercase, replace punctuation with spaces, collapse whitespace.
fn normalize_answer(answer: &str) -> String {
    let lowered: String = answer
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Taxonomy {
        Taxonomy::from_edges([
            ("animal".to_string(), "entity".to_string()),
            ("dog".to_string(), "animal".to_string()),
            ("cat".to_string(), "animal".to_string()),
        ])
        .unwrap()
    }

    #[test]
    fn depths_start_at_one() {
        let tax = toy();
        assert_eq!(tax.depth("entity"), Some(1));
        assert_eq!(tax.depth("animal"), Some(2));
        assert_eq!(tax.depth("dog"), Some(3));
    }

    #[test]
    fn wup_of_node_with_itself_is_one() {
        let tax = toy();
        for name in ["entity", "animal", "dog", "cat"] {
            assert_eq!(tax.wup(name, name).unwrap(), 1.0);
        }
    }

    #[test]
    fn wup_siblings() {
        // lcs(dog, cat) = animal at depth 2: 2*2 / (3+3) = 2/3.
        assert_eq!(toy().wup("dog", "cat").unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn wup_root_to_leaf() {
        // lcs(entity, dog) = entity at depth 1: 2*1 / (1+3) = 0.5.
        assert_eq!(toy().wup("entity", "dog").unwrap(), 0.5);
    }

    #[test]
    fn wup_is_symmetric() {
        let tax = toy();
        assert_eq!(tax.wup("dog", "cat").unwrap(), tax.wup("cat", "dog").unwrap());
    }

    #[test]
    fn wup_unknown_term() {
        assert!(matches!(toy().wup("dog", "unicorn"), Err(EvalError::UnknownTerm(_))));
    }

    #[test]
    fn rejects_two_roots() {
        let err = Taxonomy::from_edges([
            ("a".to_string(), "root1".to_string()),
            ("b".to_string(), "root2".to_string()),
        ])
        .unwrap_err();
        assert!(matches!(err, EvalError::InvalidTaxonomy(_)));
    }

    #[test]
    fn rejects_multiple_parents() {
        let err = Taxonomy::from_edges([
            ("a".to_string(), "root".to_string()),
            ("b".to_string(), "root".to_string()),
            ("a".to_string(), "b".to_string()),
        ])
        .unwrap_err();
        assert!(matches!(err, EvalError::InvalidTaxonomy(_)));
    }

    #[test]
    fn rejects_cycle() {
        let err = Taxonomy::from_edges([
            ("a".to_string(), "root".to_string()),
            ("b".to_string(), "c".to_string()),
            ("c".to_string(), "b".to_string()),
        ])
        .unwrap_err();
        assert!(matches!(err, EvalError::InvalidTaxonomy(_)));
    }

    #[test]
    fn edge_list_parses() {
        let tax = Taxonomy::from_edge_list("# comment\nanimal\tentity\ndog\tanimal\n").unwrap();
        assert!(tax.contains("dog"));
        assert_eq!(tax.root(), "entity");
    }

    #[test]
    fn edge_list_rejects_missing_tab() {
        assert!(Taxonomy::from_edge_list("dog animal").is_err());
    }

    #[test]
    fn answer_normalization_matches() {
        assert_eq!(toy().answer_to_node("Dogs."), Some("dog"));
    }

    #[test]
    fn answer_longest_token_wins() {
        assert_eq!(toy().answer_to_node("a brown dog"), Some("dog"));
    }

    #[test]
    fn answer_without_match_is_none() {
        assert_eq!(toy().answer_to_node("seventeen"), None);
    }

    #[test]
    fn answer_prefers_longer_token() {
        let tax = Taxonomy::from_edges([
            ("cat".to_string(), "animal".to_string()),
            ("caterpillar".to_string(), "animal".to_string()),
        ])
        .unwrap();
        assert_eq!(tax.answer_to_node("cat or caterpillar"), Some("caterpillar"));
    }
}
