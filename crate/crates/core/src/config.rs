//! JSON ingestion. A document with a `dgus` key is a microgrid; one with a
//! `subsystems` key is a generic discrete-time network.

use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::microgrid::{MicrogridConfig, MicrogridPlant};
use crate::model::{CouplingGraph, DiscreteSubsystem, Edge, NetworkModel};
use crate::{Error, Result};

/// A directed coupling `from → to` with weight `l_{to,from}`, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDefinition {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDefinition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub subsystems: Vec<DiscreteSubsystem>,
    #[serde(default)]
    pub edges: Vec<EdgeDefinition>,
}

impl NetworkDefinition {
    pub fn network(&self) -> Result<NetworkModel> {
        let edges = self
            .edges
            .iter()
            .map(|e| {
                if e.from == 0 || e.to == 0 {
                    return Err(Error::Graph(format!("edge {}→{}: node ids are 1-based", e.from, e.to)));
                }
                Ok(Edge {
                    from: e.from - 1,
                    to: e.to - 1,
                    weight: e.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkModel::new(self.subsystems.clone(), CouplingGraph::new(self.subsystems.len(), &edges)?)
    }
}

#[derive(Debug, Clone)]
pub enum Definition {
    Microgrid(Box<MicrogridPlant>),
    Network(NetworkDefinition),
}

impl Definition {
    pub fn default_microgrid() -> Result<Self> {
        Ok(Self::Microgrid(Box::new(MicrogridPlant::new(MicrogridConfig::default_six_dgu())?)))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let keys = value.as_object().map(|o| (o.contains_key("dgus"), o.contains_key("subsystems")));
        match keys {
            Some((true, false)) => {
                let config: MicrogridConfig = from_value(value)?;
                config.validate()?;
                Ok(Self::Microgrid(Box::new(MicrogridPlant::new(config)?)))
            }
            Some((false, true)) => {
                let def: NetworkDefinition = from_value(value)?;
                def.network()?;
                Ok(Self::Network(def))
            }
            _ => Err(Error::Schema {
                path: ".".into(),
                message: "expected an object with exactly one of `dgus` or `subsystems`".into(),
            }),
        }
    }

    /// The model used for synthesis: the LM discretization for a microgrid.
    pub fn network(&self) -> Result<NetworkModel> {
        match self {
            Self::Microgrid(p) => Ok(p.lm.clone()),
            Self::Network(d) => d.network(),
        }
    }

    /// `(A, B)` of the model the LQR baseline is designed on.
    pub fn lqr_model(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self {
            Self::Microgrid(p) => Ok((p.exact.a.clone(), p.exact.b.clone())),
            Self::Network(d) => {
                let g = d.network()?.assemble(None)?;
                Ok((g.a, g.b))
            }
        }
    }

    pub fn plant(&self) -> Option<&MicrogridPlant> {
        match self {
            Self::Microgrid(p) => Some(p),
            Self::Network(_) => None,
        }
    }
}

/// Deserializes `value`, reporting failures with the JSON path.
pub fn from_value<T: DeserializeOwned>(value: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgrid::DEFAULT_CONFIG_JSON;

    const SCALAR_PAIR: &str = r#"{
        "subsystems": [
            {"a": [[1.1]], "b": [[1.0]], "f": [[1.0]], "c": [[1.0]]},
            {"a": [[0.5]], "b": [[1.0]], "f": [[1.0]], "c": [[1.0]]}
        ],
        "edges": [{"from": 1, "to": 2, "weight": 0.1}, {"from": 2, "to": 1, "weight": 0.1}]
    }"#;

    #[test]
    fn bundled_config_is_a_microgrid() {
        let def = Definition::from_json(DEFAULT_CONFIG_JSON).unwrap();
        assert!(def.plant().is_some());
        assert_eq!(def.network().unwrap().len(), 6);
    }

    #[test]
    fn generic_network_round_trips() {
        let def = Definition::from_json(SCALAR_PAIR).unwrap();
        let Definition::Network(nd) = &def else { panic!("expected a network") };
        let net = def.network().unwrap();
        assert_eq!(net.len(), 2);
        assert!(net.is_symmetric());
        let again = Definition::from_json(&serde_json::to_string(nd).unwrap()).unwrap();
        let Definition::Network(nd2) = again else { panic!() };
        assert_eq!(nd, &nd2);
    }

    #[test]
    fn schema_error_names_the_path() {
        let bad = DEFAULT_CONFIG_JSON.replacen("\"v_in\"", "\"vin\"", 1);
        match Definition::from_json(&bad) {
            Err(Error::Schema { path, .. }) => assert!(path.starts_with("dgus[0]"), "{path}"),
            other => panic!("{other:?}"),
        }
        let bad = SCALAR_PAIR.replace("[[0.5]]", "[[0.5, 1.0]]");
        match Definition::from_json(&bad) {
            Err(Error::Schema { path, .. }) => assert!(path.starts_with("subsystems[1]"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_location() {
        match Definition::from_json("{\"dgus\": [") {
            Err(Error::Schema { path, .. }) => assert!(path.starts_with("line 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ambiguous_document_rejected() {
        assert!(matches!(Definition::from_json("{}"), Err(Error::Schema { .. })));
        assert!(matches!(Definition::from_json("[1]"), Err(Error::Schema { .. })));
    }

    #[test]
    fn zero_based_edge_rejected() {
        let bad = SCALAR_PAIR.replacen("\"from\": 1", "\"from\": 0", 1);
        assert!(matches!(Definition::from_json(&bad), Err(Error::Graph(_))));
    }
}
