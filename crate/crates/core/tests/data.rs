use std::fs;

use panther_core::data::{gen_dataset, load_dataset, save_dataset, Conversation, GridSpec};
use panther_core::error::Error;

const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];
const WORDS: [&str; 17] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
];

/// Reads block colors back from the pixel grid, checking every pixel of a
/// block agrees.
fn decode_blocks(c: &Conversation) -> Vec<Vec<&'static str>> {
    let img = &c.image;
    let (rows, cols) = (img.height / c.block, img.width / c.block);
    (0..rows)
        .map(|r| {
            (0..cols)
                .map(|col| {
                    let px = |y: usize, x: usize| [0, 1, 2].map(|ch| img.pixel(y, x, ch));
                    let first = px(r * c.block, col * c.block);
                    for y in r * c.block..(r + 1) * c.block {
                        for x in col * c.block..(col + 1) * c.block {
                            assert_eq!(px(y, x), first);
                        }
                    }
                    PALETTE.iter().find(|(_, rgb)| *rgb == first).expect("palette color").0
                })
                .collect()
        })
        .collect()
}

/// Answers a question from the decoded block colors alone.
fn evaluate(question: &str, blocks: &[Vec<&str>]) -> String {
    let w: Vec<&str> = question.split(' ').collect();
    let number = |s: &str| WORDS.iter().position(|&x| x == s).unwrap();
    let all = || blocks.iter().flatten();
    match w.as_slice() {
        ["what", "color", "is", "the", "block", "in", "row", r, "column", c] => {
            blocks[number(r) - 1][number(c) - 1].to_string()
        }
        ["what", "color", "is", "the", v, h, "block"] => {
            let r = if *v == "top" { 0 } else { blocks.len() - 1 };
            let c = if *h == "left" { 0 } else { blocks[0].len() - 1 };
            blocks[r][c].to_string()
        }
        ["how", "many", color, "blocks", "are", "there"] => {
            WORDS[all().filter(|b| *b == color).count()].to_string()
        }
        ["is", "there", "a", color, "block"] => {
            if all().any(|b| b == color) { "yes" } else { "no" }.to_string()
        }
        _ => panic!("unexpected question {question:?}"),
    }
}

#[test]
fn every_answer_is_rederived_from_pixels() {
    for grid in [GridSpec::default(), GridSpec { height: 8, width: 12, patch: 4, block: 4 }] {
        let data = gen_dataset(200, (1, 6), &grid, 17).unwrap();
        let mut kinds = std::collections::BTreeSet::new();
        for c in &data {
            let blocks = decode_blocks(c);
            for t in &c.turns {
                assert_eq!(evaluate(&t.question, &blocks), t.answer, "{}", t.question);
                kinds.insert(t.question.split(' ').take(2).collect::<Vec<_>>().join(" "));
            }
        }
        assert_eq!(kinds.len(), 3, "{kinds:?}");
    }
}

#[test]
fn seed_fixes_the_dataset_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let g = GridSpec::default();
    save_dataset(&a, &gen_dataset(20, (1, 4), &g, 5).unwrap()).unwrap();
    save_dataset(&b, &gen_dataset(20, (1, 4), &g, 5).unwrap()).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let other = gen_dataset(20, (1, 4), &g, 6).unwrap();
    assert_ne!(load_dataset(&a).unwrap(), other);
}

#[test]
fn single_turn_range() {
    let data = gen_dataset(30, (1, 1), &GridSpec::default(), 1).unwrap();
    assert!(data.iter().all(|c| c.num_turns() == 1));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let data = gen_dataset(100, (1, 5), &GridSpec::default(), 2).unwrap();
    save_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    fs::write(&path, "").unwrap();
    assert!(load_dataset(&path).unwrap().is_empty());
}

#[test]
fn truncated_file_names_the_failing_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    save_dataset(&path, &gen_dataset(3, (1, 2), &GridSpec::default(), 3).unwrap()).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() - 40]).unwrap();
    match load_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    fs::write(&path, "{\"id\": 1}\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));
}
