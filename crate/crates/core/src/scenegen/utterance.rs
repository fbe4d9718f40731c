use rand::Rng;

use super::{Relation, SceneSpec, RELATIONS};
use crate::error::{Error, Result};
use crate::textsplit::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// "the red chair ."
    Attribute,
    /// "the red chair left of the table ."
    Relational,
    /// "there is a red chair . it is left of the table ."
    TwoSentence,
}

struct Builder {
    words: Vec<String>,
    labels: Vec<Label>,
}

impl Builder {
    fn push(&mut self, text: &str, label: Label) {
        for w in text.split_whitespace() {
            self.words.push(w.to_string());
            self.labels.push(label);
        }
    }
}

/// Fills one template for `target_id`.
///
/// When the target has same-category distractors a relation is mandatory, and
/// it must hold for the target against some anchor of the chosen category
/// while failing for every distractor against every such anchor, whatever
/// the distractor's color. The result is re-checked with [`interpret`].
pub fn render_utterance(scene: &SceneSpec, target_id: usize, rng: &mut impl Rng) -> Result<(String, Vec<Label>)> {
    let target = scene.object(target_id).ok_or_else(|| Error::SceneGen(format!("no object {target_id}")))?;
    let distractors = scene.distractors(target_id);

    let mut anchor_cats: Vec<&str> = scene.objects.iter().map(|o| o.category.as_str()).filter(|c| *c != target.category).collect();
    anchor_cats.sort_unstable();
    anchor_cats.dedup();

    let mut options: Vec<(Relation, &str)> = Vec::new();
    for &cat in &anchor_cats {
        let anchors: Vec<_> = scene.objects.iter().filter(|o| o.category == cat).collect();
        for rel in RELATIONS {
            let fits = anchors.iter().any(|a| rel.holds(&target.bbox, &a.bbox));
            let excludes = distractors.iter().all(|d| anchors.iter().all(|a| !rel.holds(&d.bbox, &a.bbox)));
            if fits && excludes {
                options.push((rel, cat));
            }
        }
    }

    let template = if distractors.is_empty() && (options.is_empty() || rng.random_bool(1.0 / 3.0)) {
        Template::Attribute
    } else if options.is_empty() {
        return Err(Error::SceneGen(format!("no relation singles out object {target_id} in {}", scene.scene_id)));
    } else if rng.random_bool(0.5) {
        Template::Relational
    } else {
        Template::TwoSentence
    };

    let mut b = Builder { words: Vec::new(), labels: Vec::new() };
    let relation = match template {
        Template::Attribute => None,
        _ => Some(options[rng.random_range(0..options.len())]),
    };
    match template {
        Template::TwoSentence => b.push("there is a", Label::Other),
        _ => b.push("the", Label::Other),
    }
    b.push(&target.color, Label::Attribute);
    b.push(&target.category, Label::MainObject);
    if template == Template::TwoSentence {
        b.push(".", Label::Other);
        b.push("it", Label::Pronoun);
        b.push("is", Label::Other);
    }
    if let Some((rel, anchor)) = relation {
        b.push(rel.phrase(), Label::Relationship);
        b.push("the", Label::Other);
        b.push(anchor, Label::AuxiliaryObject);
    }
    b.push(".", Label::Other);

    let utterance = b.words.join(" ");
    let resolved = interpret(&utterance, scene)?;
    if resolved != [target_id] {
        return Err(Error::SceneGen(format!("`{utterance}` resolves to {resolved:?}, not {target_id}")));
    }
    Ok((utterance, b.labels))
}

/// Resolves a grammar utterance against a scene, returning every object id
/// it can refer to. Relations are existential over anchors of the named
/// category.
pub fn interpret(utterance: &str, scene: &SceneSpec) -> Result<Vec<usize>> {
    let w: Vec<&str> = utterance.split_whitespace().collect();
    let bad = || Error::Text(format!("`{utterance}` does not follow the grammar"));
    let (color, cat, rest) = match w.as_slice() {
        ["the", color, cat, rest @ ..] => (*color, *cat, rest),
        ["there", "is", "a", color, cat, ".", "it", "is", rest @ ..] => (*color, *cat, rest),
        _ => return Err(bad()),
    };
    let relation = match rest {
        ["."] if w[0] == "the" => None,
        [phrase @ .., "the", anchor, "."] if !phrase.is_empty() => {
            let phrase = phrase.join(" ");
            let rel = RELATIONS.into_iter().find(|r| r.phrase() == phrase).ok_or_else(bad)?;
            Some((rel, *anchor))
        }
        _ => return Err(bad()),
    };
    Ok(scene
        .objects
        .iter()
        .filter(|o| o.category == cat && o.color == color)
        .filter(|o| match relation {
            None => true,
            Some((rel, anchor)) => scene.objects.iter().any(|a| a.id != o.id && a.category == anchor && rel.holds(&o.bbox, &a.bbox)),
        })
        .map(|o| o.id)
        .collect())
}
