use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActToken, ActType, EnvError, GENERAL, NO_SLOT};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub values: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub name: String,
    pub informable: Vec<Slot>,
    pub requestable: Vec<String>,
    pub bookable: bool,
    pub entities: Vec<Entity>,
}

impl DomainSchema {
    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.informable.iter().find(|s| s.name == name)
    }

    pub fn matches<'a>(&'a self, constraints: &'a BTreeMap<String, String>) -> impl Iterator<Item = &'a Entity> + 'a {
        self.entities
            .iter()
            .filter(move |e| constraints.iter().all(|(k, v)| e.values.get(k) == Some(v)))
    }

    pub fn count_matches(&self, constraints: &BTreeMap<String, String>) -> usize {
        self.matches(constraints).count()
    }

    /// The entity the agent names for the given constraints: the first match in
    /// database order.
    pub fn first_match<'a>(&'a self, constraints: &'a BTreeMap<String, String>) -> Option<&'a Entity> {
        self.matches(constraints).next()
    }

    fn validate(&self) -> Result<(), EnvError> {
        let mut seen = std::collections::BTreeSet::new();
        for name in self.informable.iter().map(|s| &s.name).chain(&self.requestable) {
            if !seen.insert(name.as_str()) {
                return Err(EnvError::Schema(format!("{}: duplicate slot `{name}`", self.name)));
            }
            if name == "name" || name == NO_SLOT {
                return Err(EnvError::Schema(format!("{}: reserved slot name `{name}`", self.name)));
            }
        }
        if self.name == GENERAL {
            return Err(EnvError::Schema("`general` is reserved".into()));
        }
        for slot in &self.informable {
            if slot.values.is_empty() {
                return Err(EnvError::Schema(format!("{}.{} has no values", self.name, slot.name)));
            }
        }
        for e in &self.entities {
            for slot in &self.informable {
                match e.values.get(&slot.name) {
                    Some(v) if slot.values.contains(v) => {}
                    _ => {
                        return Err(EnvError::Schema(format!(
                            "{}: entity {} has no valid `{}`",
                            self.name, e.name, slot.name
                        )))
                    }
                }
            }
        }
        if self.bookable && !self.requestable.iter().any(|s| s == "ref") {
            return Err(EnvError::Schema(format!("{}: bookable domains must make `ref` requestable", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub domains: Vec<DomainSchema>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn slot(name: &str, values: &[&str]) -> Slot {
    Slot { name: name.into(), values: strings(values) }
}

impl Schema {
    pub fn new(domains: Vec<DomainSchema>) -> Result<Self, EnvError> {
        if domains.is_empty() {
            return Err(EnvError::Schema("no domains".into()));
        }
        for (i, d) in domains.iter().enumerate() {
            d.validate()?;
            if domains[..i].iter().any(|o| o.name == d.name) {
                return Err(EnvError::Schema(format!("duplicate domain `{}`", d.name)));
            }
        }
        Ok(Self { domains })
    }

    /// Restaurant, hotel and taxi with 20 database entities each. Entity values
    /// come from a fixed internal seed so the schema is identical everywhere.
    pub fn standard() -> Self {
        let restaurant = (
            "restaurant",
            vec![
                slot("food", &["italian", "chinese", "indian", "french", "thai", "british", "spanish", "korean"]),
                slot("area", &["centre", "north", "south", "east", "west"]),
                slot("pricerange", &["cheap", "moderate", "expensive"]),
            ],
            strings(&["phone", "address", "postcode", "ref"]),
            true,
        );
        let hotel = (
            "hotel",
            vec![
                slot("area", &["centre", "north", "south", "east", "west"]),
                slot("pricerange", &["cheap", "moderate", "expensive"]),
                slot("stars", &["2", "3", "4", "5"]),
                slot("type", &["hotel", "guesthouse"]),
            ],
            strings(&["phone", "address", "postcode", "ref"]),
            true,
        );
        let taxi = (
            "taxi",
            vec![
                slot("departure", &["station", "airport", "museum", "college"]),
                slot("destination", &["station", "airport", "museum", "college"]),
                slot("leave_at", &["0800", "1200", "1600", "2000"]),
            ],
            strings(&["car_type", "phone"]),
            false,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0x7079_776f_7a);
        let domains = [restaurant, hotel, taxi]
            .into_iter()
            .map(|(name, informable, requestable, bookable)| {
                let entities = (0..20)
                    .map(|i| Entity {
                        name: format!("{name}_{i}"),
                        values: informable
                            .iter()
                            .map(|s| (s.name.clone(), s.values[rng.random_range(0..s.values.len())].clone()))
                            .collect(),
                    })
                    .collect();
                DomainSchema { name: name.into(), informable, requestable, bookable, entities }
            })
            .collect();
        Self::new(domains).expect("standard schema is valid")
    }

    /// Keeps only the named domains, in schema order.
    pub fn restrict(&self, names: &[String]) -> Result<Self, EnvError> {
        for n in names {
            if self.domain(n).is_none() {
                return Err(EnvError::Schema(format!("unknown domain `{n}`")));
            }
        }
        Self::new(self.domains.iter().filter(|d| names.contains(&d.name)).cloned().collect())
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSchema> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn fingerprint(&self) -> String {
        crate::io::sha256_hex(&serde_json::to_vec(self).expect("schema serializes"))
    }

    /// Every act token the agent can emit, in canonical order.
    pub fn act_inventory(&self) -> Vec<ActToken> {
        let mut out = vec![
            ActToken::new(ActType::Nicety, GENERAL, NO_SLOT),
            ActToken::new(ActType::Goodbye, GENERAL, NO_SLOT),
        ];
        for d in &self.domains {
            out.push(ActToken::new(ActType::Inform, &d.name, "name"));
            for s in &d.informable {
                out.push(ActToken::new(ActType::Inform, &d.name, &s.name));
                out.push(ActToken::new(ActType::Request, &d.name, &s.name));
            }
            for s in d.requestable.iter().filter(|s| *s != "ref") {
                out.push(ActToken::new(ActType::Inform, &d.name, s));
            }
            if d.bookable {
                out.push(ActToken::new(ActType::OfferBook, &d.name, NO_SLOT));
                out.push(ActToken::new(ActType::BookConfirm, &d.name, "ref"));
            }
        }
        out.sort();
        out.dedup();
        out
    }
}
