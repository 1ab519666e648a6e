//! In-memory LRU store of encoded codes with optional write-through.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use facecomp_core::code::{FaceCode, LayeredCode};
use serde_json::{json, Value};

/// One node of the edit tree. Codes are per-layer so that multi-level
/// transfers can be edited further; plain codes repeat one layer.
#[derive(Debug, Clone)]
pub struct Session {
    pub code_id: String,
    pub code: LayeredCode,
    pub parent: Option<String>,
    /// Ids from the root to this session.
    pub lineage: Vec<String>,
    pub created_at: String,
    pub operation: Value,
}

impl Session {
    pub fn layer(&self, k: usize) -> FaceCode {
        FaceCode {
            icon: self.code.icon.clone(),
            components: self.code.layers[k].clone(),
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.code.layers.windows(2).all(|w| w[0] == w[1])
    }

    pub fn to_json(&self) -> Value {
        json!({
            "code_id": self.code_id,
            "parent": self.parent,
            "lineage": self.lineage,
            "created_at": self.created_at,
            "operation": self.operation,
            "layered": !self.is_uniform(),
            "num_layers": self.code.layers.len(),
            "code": self.layer(0).to_json(&self.code_id),
            "layers": if self.is_uniform() {
                Value::Null
            } else {
                Value::Array((0..self.code.layers.len()).map(|k| self.layer(k).to_json(&self.code_id)).collect())
            },
        })
    }

    fn from_json(v: &Value) -> Option<Self> {
        let code_id = v["code_id"].as_str()?.to_string();
        let n = v["num_layers"].as_u64()? as usize;
        let layers: Vec<FaceCode> = match v["layers"].as_array() {
            Some(ls) => ls.iter().map(FaceCode::from_json).collect::<Result<_, _>>().ok()?,
            None => vec![FaceCode::from_json(&v["code"]).ok()?; n],
        };
        Some(Self {
            code_id,
            code: LayeredCode {
                icon: layers.first()?.icon.clone(),
                layers: layers.into_iter().map(|c| c.components).collect(),
            },
            parent: v["parent"].as_str().map(String::from),
            lineage: serde_json::from_value(v["lineage"].clone()).ok()?,
            created_at: v["created_at"].as_str()?.to_string(),
            operation: v["operation"].clone(),
        })
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Lookup {
    Missing,
    Expired,
}

#[derive(Debug)]
pub struct SessionStore {
    capacity: usize,
    next_id: u64,
    tick: u64,
    entries: HashMap<String, (Arc<Session>, u64)>,
    recency: BTreeMap<u64, String>,
    dir: Option<PathBuf>,
}

fn parse_id(id: &str) -> Option<u64> {
    id.strip_prefix('c')?.parse().ok()
}

impl SessionStore {
    pub fn new(capacity: usize, dir: Option<PathBuf>) -> std::io::Result<Self> {
        let mut next_id = 0;
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
            for e in std::fs::read_dir(d)? {
                let name = e?.file_name();
                if let Some(n) = name.to_str().and_then(|n| n.strip_suffix(".json")).and_then(parse_id) {
                    next_id = next_id.max(n + 1);
                }
            }
        }
        Ok(Self {
            capacity: capacity.max(1),
            next_id,
            tick: 0,
            entries: HashMap::new(),
            recency: BTreeMap::new(),
            dir,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, code: LayeredCode, parent: Option<&Session>, operation: Value) -> Arc<Session> {
        let code_id = format!("c{:08}", self.next_id);
        self.next_id += 1;
        let mut lineage = parent.map(|p| p.lineage.clone()).unwrap_or_default();
        lineage.push(code_id.clone());
        let session = Arc::new(Session {
            code_id: code_id.clone(),
            code,
            parent: parent.map(|p| p.code_id.clone()),
            lineage,
            created_at: chrono::Utc::now().to_rfc3339(),
            operation,
        });
        if let Some(d) = &self.dir {
            let path = d.join(format!("{code_id}.json"));
            if let Err(e) = std::fs::write(&path, session.to_json().to_string()) {
                tracing::warn!("session write-through to {} failed: {e}", path.display());
            }
        }
        self.put(session.clone());
        session
    }

    fn put(&mut self, session: Arc<Session>) {
        self.tick += 1;
        if let Some((_, old)) = self.entries.insert(session.code_id.clone(), (session.clone(), self.tick)) {
            self.recency.remove(&old);
        }
        self.recency.insert(self.tick, session.code_id.clone());
        while self.entries.len() > self.capacity {
            let (_, victim) = self.recency.pop_first().expect("recency tracks entries");
            self.entries.remove(&victim);
        }
    }

    pub fn get(&mut self, id: &str) -> Result<Arc<Session>, Lookup> {
        if let Some((s, old)) = self.entries.get(id).cloned() {
            self.recency.remove(&old);
            self.tick += 1;
            self.recency.insert(self.tick, id.to_string());
            self.entries.insert(id.to_string(), (s.clone(), self.tick));
            return Ok(s);
        }
        if let Some(s) = self.dir.as_deref().and_then(|d| load(d, id)) {
            let s = Arc::new(s);
            self.put(s.clone());
            return Ok(s);
        }
        match parse_id(id) {
            Some(n) if n < self.next_id => Err(Lookup::Expired),
            _ => Err(Lookup::Missing),
        }
    }
}

fn load(dir: &Path, id: &str) -> Option<Session> {
    parse_id(id)?;
    let text = std::fs::read_to_string(dir.join(format!("{id}.json"))).ok()?;
    Session::from_json(&serde_json::from_str(&text).ok()?)
}
