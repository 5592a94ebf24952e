//! Rule-based solvers that recover answers and supporting lines from the
//! raw text of a sample. Used to cross-check the generators.

use crate::error::{Error, Result};
use crate::taskgen::{Answer, Sample, Task};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Solution {
    pub answer: Answer,
    pub supporting: Vec<usize>,
}

fn unsupported(msg: &str) -> Error {
    Error::UnsupportedSample(msg.to_string())
}

fn words(line: &str) -> Vec<String> {
    line.trim_end_matches(['.', '?'])
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// `(entity, location)` if the line is a movement sentence.
fn movement(line: &str) -> Option<(String, String)> {
    let w = words(line);
    let to = w.iter().position(|x| x == "to")?;
    if to + 2 != w.len() - 1 || w[to + 1] != "the" {
        return None;
    }
    Some((w[0].clone(), w[w.len() - 1].clone()))
}

pub fn solve(sample: &Sample) -> Result<Solution> {
    match sample.task {
        Task::Hop1 => solve_hop1(sample),
        Task::Hop2 => solve_hop2(sample),
        Task::Vt => solve_vt(sample),
    }
}

fn solve_hop1(sample: &Sample) -> Result<Solution> {
    let entity = words(&sample.query)
        .last()
        .cloned()
        .ok_or_else(|| unsupported("empty query"))?;
    for (i, line) in sample.context.iter().enumerate().rev() {
        if let Some((e, loc)) = movement(line) {
            if e == entity {
                return Ok(Solution {
                    answer: Answer::One(loc),
                    supporting: vec![i],
                });
            }
        }
    }
    Err(unsupported("entity never moves"))
}

fn solve_hop2(sample: &Sample) -> Result<Solution> {
    let object = words(&sample.query)
        .last()
        .cloned()
        .ok_or_else(|| unsupported("empty query"))?;
    let mut event = None;
    for (i, line) in sample.context.iter().enumerate() {
        let w = words(line);
        if w.last() == Some(&object) && (line.contains(" picked up ") || line.contains(" discarded ")) {
            event = Some((i, w[0].clone(), line.contains(" discarded ")));
        }
    }
    let (line, holder, dropped) = event.ok_or_else(|| unsupported("object never handled"))?;
    let end = if dropped { line } else { sample.context.len() };
    for i in (0..end).rev() {
        if let Some((e, loc)) = movement(&sample.context[i]) {
            if e == holder {
                return Ok(Solution {
                    answer: Answer::One(loc),
                    supporting: vec![line, i],
                });
            }
        }
    }
    Err(unsupported("holder location unknown"))
}

fn solve_vt(sample: &Sample) -> Result<Solution> {
    let value = words(&sample.query)
        .last()
        .cloned()
        .ok_or_else(|| unsupported("empty query"))?;
    // "VAR X = rhs" -> (X, rhs)
    let assigns: Vec<Option<(String, String)>> = sample
        .context
        .iter()
        .map(|l| {
            let (lhs, rhs) = l.split_once(" = ")?;
            Some((lhs.strip_prefix("VAR ")?.to_string(), rhs.trim().to_string()))
        })
        .collect();
    let mut target = value;
    let mut names = Vec::new();
    let mut supporting = Vec::new();
    loop {
        let hit = assigns
            .iter()
            .enumerate()
            .find(|(_, a)| a.as_ref().is_some_and(|(_, rhs)| *rhs == target));
        match hit {
            Some((i, Some((name, _)))) => {
                supporting.push(i);
                names.push(name.clone());
                target = format!("VAR {name}");
            }
            _ => break,
        }
    }
    if names.is_empty() {
        return Err(unsupported("value never assigned"));
    }
    Ok(Solution {
        answer: Answer::Set(names),
        supporting,
    })
}
