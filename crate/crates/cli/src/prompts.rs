//! Prompt files: UTF-8, one prompt per line. A line whose comma-separated
//! fields all parse as integers is a list of token ids; any other line is
//! toy-alphabet text where `a … z` map to ids `0 … 25`. Blank lines are
//! skipped.

use std::path::Path;

use coupling_core::model::Token;

use crate::error::{config, Result};

pub fn parse_prompt(line: &str) -> Result<Vec<Token>> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if let Ok(ids) = fields.iter().map(|f| f.parse::<Token>()).collect::<Result<Vec<_>, _>>() {
        return Ok(ids);
    }
    line.trim()
        .chars()
        .map(|c| match c {
            'a'..='z' => Ok(c as Token - 'a' as Token),
            _ => Err(config(format!(
                "character '{c}' is neither a token id list nor toy-alphabet text"
            ))),
        })
        .collect()
}

pub fn read_prompts(path: &Path) -> Result<Vec<Vec<Token>>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| config(format!("cannot read prompts {}: {e}", path.display())))?;
    let prompts: Vec<Vec<Token>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_prompt(l).map_err(|e| config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect::<Result<_>>()?;
    if prompts.is_empty() {
        return Err(config(format!("{} contains no prompts", path.display())));
    }
    Ok(prompts)
}
