use rand::Rng;

use super::{ActToken, ActType};

/// Number of synonymous surface variants per template.
pub const RESPONSE_VARIANTS: usize = 3;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn placeholder(domain: &str, slot: &str) -> String {
    format!("[{domain}_{slot}]")
}

fn token_phrase(tok: &ActToken, v: usize) -> Vec<String> {
    let (d, s) = (tok.domain(), tok.slot());
    let p = placeholder(d, s);
    let text = match tok.kind() {
        ActType::Inform if s == "name" => {
            ["{p} is a good match", "i recommend {p}", "how about {p}"][v].replace("{p}", &p)
        }
        ActType::Inform => ["the {s} is {p}", "its {s} is {p}", "{p} is the {s}"][v].replace("{s}", s).replace("{p}", &p),
        ActType::Request => {
            ["what {s} do you want", "which {s} do you prefer", "any preference on {s}"][v].replace("{s}", s)
        }
        ActType::OfferBook => ["shall i book it", "do you want me to book it", "i can book it for you"][v].to_string(),
        ActType::BookConfirm => [
            "booked your reference is {p}",
            "done the reference number is {p}",
            "your booking is confirmed ref {p}",
        ][v]
        .replace("{p}", &p),
        ActType::Nicety => ["you are welcome", "my pleasure", "glad to help"][v].to_string(),
        ActType::Goodbye => ["goodbye", "have a nice day", "bye for now"][v].to_string(),
    };
    words(&text)
}

/// Surface form of a composite act for a fixed variant index.
pub fn realize_variant(act: &[ActToken], variant: usize) -> Vec<String> {
    let v = variant % RESPONSE_VARIANTS;
    act.iter().flat_map(|t| token_phrase(t, v)).collect()
}

/// Delexicalized response for `act`; one variant is drawn for the whole act.
pub fn realize_response<R: Rng>(act: &[ActToken], rng: &mut R) -> Vec<String> {
    let v = rng.random_range(0..RESPONSE_VARIANTS);
    realize_variant(act, v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UserIntent {
    Greet,
    Constraints { domain: String, slots: Vec<String>, first: bool, last: bool, book: bool },
    Request { domain: String, slots: Vec<String> },
    Book { domain: String },
    Thanks,
    Bye,
}

const GREET: [&str; 3] = ["hello", "hi there", "good day"];
const INTRO_FIRST: [&str; 3] = ["i am looking for a {d}", "i need a {d}", "find me a {d}"];
const INTRO_MORE: [&str; 3] = ["it should have", "i would like", "also"];
const RECOMMEND: [&str; 3] = ["can you recommend one", "please suggest one", "which one do you recommend"];
const WANT_BOOK: [&str; 3] = ["i want to book", "i need a booking", "and book it"];
const ASK: [&str; 3] = ["what is the", "can i get the", "tell me the"];
const BOOK: [&str; 3] = ["yes please book it", "book it please", "go ahead and book"];
const THANKS: [&str; 3] = ["thank you", "thanks a lot", "great thanks"];
const BYE: [&str; 3] = ["bye", "goodbye", "that is all bye"];

fn pick<'a, R: Rng>(rng: &mut R, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

pub fn user_utterance<R: Rng>(intent: &UserIntent, rng: &mut R) -> Vec<String> {
    let mut out = Vec::new();
    match intent {
        UserIntent::Greet => out.extend(words(pick(rng, &GREET))),
        UserIntent::Constraints { domain, slots, first, last, book } => {
            let intro = if *first { pick(rng, &INTRO_FIRST) } else { pick(rng, &INTRO_MORE) };
            out.extend(words(&intro.replace("{d}", domain)));
            for (i, s) in slots.iter().enumerate() {
                if i > 0 {
                    out.push("and".into());
                }
                out.push(s.clone());
                out.push(placeholder(domain, s));
            }
            if *last {
                out.extend(words(pick(rng, &RECOMMEND)));
                if *book {
                    out.extend(words(pick(rng, &WANT_BOOK)));
                }
            }
        }
        UserIntent::Request { domain, slots } => {
            out.extend(words(pick(rng, &ASK)));
            for (i, s) in slots.iter().enumerate() {
                if i > 0 {
                    out.extend(words("and the"));
                }
                out.push(s.clone());
            }
            out.extend(words(&format!("of the {domain}")));
        }
        UserIntent::Book { domain } => {
            out.extend(words(pick(rng, &BOOK)));
            out.extend(words(&format!("the {domain}")));
        }
        UserIntent::Thanks => out.extend(words(pick(rng, &THANKS))),
        UserIntent::Bye => out.extend(words(pick(rng, &BYE))),
    }
    out
}

/// Every word a template can produce for the schema's acts and slots.
pub(crate) fn template_words(schema: &super::Schema) -> Vec<String> {
    let acts = schema.act_inventory();
    let mut out: Vec<String> = Vec::new();
    for v in 0..RESPONSE_VARIANTS {
        out.extend(realize_variant(&acts, v));
    }
    let fixed = [&GREET, &INTRO_MORE, &RECOMMEND, &WANT_BOOK, &ASK, &BOOK, &THANKS, &BYE];
    out.extend(fixed.iter().flat_map(|t| t.iter()).flat_map(|s| words(s)));
    out.extend(words("and the of"));
    for d in &schema.domains {
        out.extend(INTRO_FIRST.iter().flat_map(|s| words(&s.replace("{d}", &d.name))));
        out.push(d.name.clone());
        for s in &d.informable {
            out.push(s.name.clone());
            out.push(placeholder(&d.name, &s.name));
        }
        out.extend(d.requestable.iter().cloned());
    }
    out
}
