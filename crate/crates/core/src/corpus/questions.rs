use rand::Rng;
use serde::{Deserialize, Serialize};

/// A math question with its answer key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub answer: String,
}

/// Phrase material a tutor or student draws on while working one question.
#[derive(Debug, Clone)]
pub(crate) struct Worked {
    pub question: Question,
    /// Plausible wrong answers a student might give.
    pub wrong: Vec<String>,
    /// Scaffolding steps, in order.
    pub steps: Vec<String>,
    /// Guiding questions.
    pub prompts: Vec<String>,
    /// Direct procedure statements.
    pub directs: Vec<String>,
    /// A partial result a student may report.
    pub partial: String,
}

pub(crate) fn draw_question<R: Rng>(rng: &mut R) -> Worked {
    match rng.random_range(0..3) {
        0 => ratio(rng),
        1 => sequence(rng),
        _ => order_of_operations(rng),
    }
}

fn ratio<R: Rng>(rng: &mut R) -> Worked {
    let a = rng.random_range(1..=5u32);
    let mut b = rng.random_range(1..=5u32);
    if b == a {
        b = a % 5 + 1;
    }
    let per = rng.random_range(2..=9u32);
    let parts = a + b;
    let total = parts * per;
    let big = a.max(b);
    let answer = big * per;
    Worked {
        question: Question {
            text: format!(
                "share {total} sweets in the ratio {a} : {b} . how many sweets are in the larger share ?"
            ),
            answer: answer.to_string(),
        },
        wrong: vec![
            (total / 2).to_string(),
            (big * parts).to_string(),
            (answer + per).to_string(),
        ],
        steps: vec![
            format!("first add the parts {a} + {b} to get {parts} parts ."),
            format!("then divide {total} by {parts} so one part is {per} ."),
            format!("now multiply {per} by {big} for the larger share ."),
        ],
        prompts: vec![
            "how many parts are there altogether ?".into(),
            format!("what is {total} divided by {parts} ?"),
            format!("so what is {big} lots of {per} ?"),
        ],
        directs: vec![
            format!("you need to divide {total} by {parts} ."),
            format!("one part is {per} so the larger share is {answer} ."),
            format!("the answer is {answer} ."),
        ],
        partial: per.to_string(),
    }
}

fn sequence<R: Rng>(rng: &mut R) -> Worked {
    let start = rng.random_range(1..=20u32);
    let diff = rng.random_range(2..=9u32);
    let terms: Vec<u32> = (0..5).map(|i| start + i * diff).collect();
    let answer = terms[4];
    Worked {
        question: Question {
            text: format!(
                "what is the next term in the sequence {} , {} , {} , {} ?",
                terms[0], terms[1], terms[2], terms[3]
            ),
            answer: answer.to_string(),
        },
        wrong: vec![
            (terms[3] + 1).to_string(),
            (answer + diff).to_string(),
            (terms[3] * 2).to_string(),
        ],
        steps: vec![
            "first find the gap between each pair of terms .".into(),
            format!("each term goes up by {diff} ."),
            format!("so add {diff} to the last term {} .", terms[3]),
        ],
        prompts: vec![
            format!("what do you add to get from {} to {} ?", terms[0], terms[1]),
            "is the gap the same each time ?".into(),
            format!("what is {} + {diff} ?", terms[3]),
        ],
        directs: vec![
            format!("the sequence goes up by {diff} each time ."),
            format!("you add {diff} to {} ." , terms[3]),
            format!("the answer is {answer} ."),
        ],
        partial: diff.to_string(),
    }
}

fn order_of_operations<R: Rng>(rng: &mut R) -> Worked {
    let a = rng.random_range(2..=12u32);
    let b = rng.random_range(2..=9u32);
    let c = rng.random_range(2..=9u32);
    let product = b * c;
    let answer = a + product;
    Worked {
        question: Question {
            text: format!("work out {a} + {b} x {c} ."),
            answer: answer.to_string(),
        },
        wrong: vec![
            ((a + b) * c).to_string(),
            (a + b + c).to_string(),
            (answer + 1).to_string(),
        ],
        steps: vec![
            "first remember multiplication comes before addition .".into(),
            format!("so work out {b} x {c} = {product} first ."),
            format!("then add {a} to {product} ."),
        ],
        prompts: vec![
            "which do you do first , the add or the multiply ?".into(),
            format!("what is {b} x {c} ?"),
            format!("what is {a} + {product} ?"),
        ],
        directs: vec![
            "you must multiply before you add .".into(),
            format!("{b} x {c} is {product} ."),
            format!("the answer is {answer} ."),
        ],
        partial: product.to_string(),
    }
}
