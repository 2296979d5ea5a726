//! On-disk scenario document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demand::{DemandEntry, DemandSchedule};
use crate::error::Result;
use crate::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Boundary,
    FourWay,
    TJunction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(rename = "type")]
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkDoc {
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub speed_mps: f64,
    pub lanes: usize,
}

/// A lane is addressed as `[link index, lane index]`; lane 0 is the leftmost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovementDoc {
    pub in_lane: [usize; 2],
    pub out_lane: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionDoc {
    pub id: String,
    pub movements: Vec<MovementDoc>,
    pub phases: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemandDoc {
    pub entries: Vec<DemandEntry>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDoc {
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<NodeDoc>,
    pub links: Vec<LinkDoc>,
    pub intersections: Vec<IntersectionDoc>,
    #[serde(default)]
    pub demand: DemandDoc,
}

impl ScenarioDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// A validated network together with its demand.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub network: std::sync::Arc<Network>,
    pub demand: DemandSchedule,
    pub doc: ScenarioDoc,
}

impl Scenario {
    pub fn from_doc(doc: &ScenarioDoc) -> Result<Self> {
        let network = Network::from_doc(doc)?;
        let demand = DemandSchedule::from_doc(&doc.demand, &network)?;
        Ok(Self {
            name: doc.name.clone(),
            network: std::sync::Arc::new(network),
            demand,
            doc: doc.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_doc(&ScenarioDoc::load(path)?)
    }
}
