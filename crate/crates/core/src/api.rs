//! JSON wire types of the HTTP generation API, shared by the service, the
//! client and the command line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GenerationRequest, Generator, SoftConstraint};
use crate::layout::{CategoryVocabulary, WireLayout, WireObject, DEFAULT_MAX_OBJECTS};
use crate::mcl::PairReport;
use crate::model::Model;
use crate::svg::render_svg;

/// Upper bound on candidates per request.
pub const MAX_COUNT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoriesResponse {
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftItem {
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Svg,
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default)]
    pub hard: Vec<WireObject>,
    #[serde(default)]
    pub soft: Vec<SoftItem>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_objects: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl Default for GenerateRequest {
    fn default() -> Self {
        GenerateRequest {
            hard: Vec::new(),
            soft: Vec::new(),
            count: 1,
            seed: 0,
            format: Format::Json,
            max_objects: None,
            temperature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub layout: WireLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ErrorBody {
    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::Request { field, message } => ErrorBody {
                error: message.clone(),
                field: Some(field.clone()),
            },
            other => ErrorBody {
                error: other.to_string(),
                field: None,
            },
        }
    }
}

impl GenerateRequest {
    /// Resolves category names and checks every field against `vocab`.
    pub fn to_generation(&self, vocab: &CategoryVocabulary) -> Result<GenerationRequest> {
        if self.count > MAX_COUNT {
            return Err(Error::request("count", format!("at most {MAX_COUNT}")));
        }
        let hard = self
            .hard
            .iter()
            .enumerate()
            .map(|(i, o)| {
                o.to_object(vocab)
                    .map_err(|_| Error::request(format!("hard[{i}].category"), format!("unknown category `{}`", o.category)))
            })
            .collect::<Result<Vec<_>>>()?;
        let soft = self
            .soft
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(SoftConstraint {
                    category: vocab.index_of(&s.category).map_err(|_| {
                        Error::request(format!("soft[{i}].category"), format!("unknown category `{}`", s.category))
                    })?,
                    size: s.size,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let req = GenerationRequest {
            hard,
            soft,
            count: self.count,
            max_objects: self.max_objects.unwrap_or(DEFAULT_MAX_OBJECTS),
            seed: self.seed,
            temperature: self.temperature.unwrap_or(1.0),
        };
        req.validate(vocab.len())?;
        Ok(req)
    }
}

/// Validates, generates and encodes one request against a loaded model.
pub fn generate(model: &Model, pairing: Option<&PairReport>, request: &GenerateRequest) -> Result<GenerateResponse> {
    let req = request.to_generation(&model.vocab)?;
    let layouts = Generator::new(model, pairing).generate(&req)?;
    let candidates = layouts
        .iter()
        .map(|l| {
            Ok(Candidate {
                layout: WireLayout::from_layout(l, &model.vocab)?,
                svg: (request.format == Format::Svg).then(|| render_svg(l, &model.vocab)),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GenerateResponse { candidates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Canvas, Profile};
    use crate::model::ModelConfig;

    fn model() -> Model {
        let p = Profile::SingleColumnDoc;
        Model::new(ModelConfig::default(), p.vocabulary(), Canvas::default(), 1).unwrap()
    }

    #[test]
    fn parses_the_documented_body() {
        let body = r#"{"hard": [{"category": "title", "bbox": [0.1, 0.05, 0.8, 0.06]}],
            "soft": [{"category": "figure", "size": [0.4, 0.3]}], "count": 5, "seed": 42, "format": "svg"}"#;
        let r: GenerateRequest = serde_json::from_str(body).unwrap();
        assert_eq!(r.count, 5);
        assert_eq!(r.format, Format::Svg);
        assert_eq!(r.soft[0].size, Some([0.4, 0.3]));
        let d: GenerateRequest = serde_json::from_str("{}").unwrap();
        assert_eq!(d, GenerateRequest::default());
        assert!(serde_json::from_str::<GenerateRequest>(r#"{"colour": 1}"#).is_err());
    }

    #[test]
    fn field_level_errors() {
        let m = model();
        let bad_cat = GenerateRequest {
            soft: vec![SoftItem { category: "banner".into(), size: None }],
            ..GenerateRequest::default()
        };
        let e = generate(&m, None, &bad_cat).unwrap_err();
        assert_eq!(ErrorBody::from_error(&e).field.as_deref(), Some("soft[0].category"));
        let bad_box = GenerateRequest {
            hard: vec![WireObject { category: "text".into(), bbox: [0.9, 0.0, 0.5, 0.1] }],
            ..GenerateRequest::default()
        };
        let e = generate(&m, None, &bad_box).unwrap_err();
        assert_eq!(ErrorBody::from_error(&e).field.as_deref(), Some("hard[0].bbox"));
        let too_many = GenerateRequest { count: MAX_COUNT + 1, ..GenerateRequest::default() };
        assert!(matches!(generate(&m, None, &too_many), Err(Error::Request { .. })));
    }

    #[test]
    fn svg_only_when_asked() {
        let m = model();
        let mut r = GenerateRequest { count: 2, seed: 3, ..GenerateRequest::default() };
        let json = generate(&m, None, &r).unwrap();
        assert!(json.candidates.iter().all(|c| c.svg.is_none()));
        r.format = Format::Svg;
        let svg = generate(&m, None, &r).unwrap();
        assert_eq!(svg.candidates.len(), 2);
        assert!(svg.candidates.iter().all(|c| c.svg.as_deref().is_some_and(|s| s.starts_with("<svg"))));
        assert_eq!(json.candidates[0].layout, svg.candidates[0].layout);
        let text = serde_json::to_string(&json).unwrap();
        assert!(!text.contains("svg"));
    }
}
