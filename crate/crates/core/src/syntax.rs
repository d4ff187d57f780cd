//! Static Python syntax validation.
//!
//! Snippets are parsed with an embedded Python grammar, never executed.

use rustpython_parser::{parse, Mode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Snippet;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("syntax error at line {line}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub message: String,
}

pub fn syntax_check(snippet: &Snippet) -> Result<(), SyntaxError> {
    check_source(snippet.code())
}

/// Parses `source` as a Python module.
pub fn check_source(source: &str) -> Result<(), SyntaxError> {
    parse(source, Mode::Module, "<snippet>")
        .map(|_| ())
        .map_err(|err| SyntaxError {
            line: line_of_offset(source, err.offset.to_usize()),
            message: err.error.to_string(),
        })
}

// Errors reported at end of input land after the final newline; clamp them
// to the last line that exists.
fn line_of_offset(source: &str, offset: usize) -> usize {
    let offset = offset.min(source.len());
    let line = source.as_bytes()[..offset]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1;
    line.min(source.lines().count().max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snippet(code: &str) -> Snippet {
        Snippet::new(code).unwrap()
    }

    #[test]
    fn minimal_function_is_ok() {
        assert!(syntax_check(&snippet("def f():\n    return 1")).is_ok());
    }

    #[test]
    fn malformed_header_fails_on_line_one() {
        let err = syntax_check(&snippet("def f(:")).unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn error_lines_follow_the_source() {
        assert_eq!(check_source("x = 1\ny = 2\ndef g(:\n").unwrap_err().line, 3);
        assert_eq!(check_source("x = 1\n  y = 2\n").unwrap_err().line, 2);
        // unclosed bracket is reported at end of input
        assert_eq!(check_source("x = 1\ny = (\n").unwrap_err().line, 2);
    }

    #[test]
    fn modern_syntax_is_accepted() {
        for src in [
            "match cmd:\n    case [x, y]:\n        pass\n    case _:\n        pass\n",
            "async def g():\n    async with lock:\n        await h()\n",
            "x = f'{a!r:>10}'\n",
            "if (n := len(a)) > 10:\n    pass\n",
        ] {
            assert!(check_source(src).is_ok(), "{src}");
        }
    }
}
