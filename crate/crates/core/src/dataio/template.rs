//! Attribute-to-sentence templates for the tabular branch.
//!
//! Each template has two `{}` slots: the attribute name, then its value.

use crate::error::{CfcmlError, Result};

/// Template applied to attributes that have no family of their own, when a
/// table opts into a fallback.
pub const FALLBACK_TEMPLATE: &str = "The {} is {}";

const STANDARD_FAMILIES: &[(&str, &str)] = &[
    ("management", "The {} for the patient is {}"),
    ("sex", "The {} of patient is {}"),
    ("age", "The {} of patient is {}"),
    ("tumor area", "The {} in the brain is {}."),
    ("edema area", "The {} in the brain is {}."),
    ("tumor location", "The {} in the brain is {}."),
    ("lesion location", "The {} is {}"),
    ("lesion elevation", "The {} is {}"),
    ("level of diagnostic difficulty", "The {} is {}"),
    ("value of apparent diffusion coefficient", "The {} is {}"),
];

/// The ten built-in attribute names, in table order.
pub fn standard_attributes() -> impl Iterator<Item = &'static str> {
    STANDARD_FAMILIES.iter().map(|(name, _)| *name)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateTable {
    families: Vec<(String, String)>,
    fallback: Option<String>,
}

impl Default for TemplateTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl TemplateTable {
    /// The built-in clinical attribute templates, without a fallback.
    pub fn standard() -> Self {
        Self {
            families: STANDARD_FAMILIES
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        check_slots(&template)?;
        self.fallback = Some(template);
        Ok(self)
    }

    /// Adds or replaces the template for one attribute.
    pub fn with_template(
        mut self,
        attribute: impl Into<String>,
        template: impl Into<String>,
    ) -> Result<Self> {
        let (attribute, template) = (normalize(&attribute.into()), template.into());
        check_slots(&template)?;
        match self.families.iter_mut().find(|(k, _)| *k == attribute) {
            Some(entry) => entry.1 = template,
            None => self.families.push((attribute, template)),
        }
        Ok(self)
    }

    pub fn template_for(&self, attribute: &str) -> Option<&str> {
        let key = normalize(attribute);
        self.families
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, t)| t.as_str())
            .or(self.fallback.as_deref())
    }

    pub fn render(&self, attribute: &str, value: &str) -> Result<String> {
        let name = attribute.trim();
        let template = self
            .template_for(name)
            .ok_or_else(|| CfcmlError::UnknownAttribute(name.to_string()))?;
        let value = value.trim();
        if value.is_empty() {
            return Err(CfcmlError::EmptyValue(name.to_string()));
        }
        Ok(fill(template, name, value))
    }
}

/// Renders with the standard table (no fallback).
pub fn render_template(attribute: &str, value: &str) -> Result<String> {
    TemplateTable::standard().render(attribute, value)
}

/// Decimal rendering for numeric attribute values.
pub fn format_numeric(value: f64) -> String {
    format!("{value}")
}

fn normalize(attribute: &str) -> String {
    attribute.trim().to_lowercase()
}

fn check_slots(template: &str) -> Result<()> {
    if template.matches("{}").count() != 2 {
        return Err(CfcmlError::Config(format!(
            "template `{template}` must contain exactly two `{{}}` slots"
        )));
    }
    Ok(())
}

fn fill(template: &str, name: &str, value: &str) -> String {
    let mut parts = template.splitn(3, "{}");
    let head = parts.next().unwrap_or_default();
    let mid = parts.next().unwrap_or_default();
    let tail = parts.next().unwrap_or_default();
    format!("{head}{name}{mid}{value}{tail}")
}
