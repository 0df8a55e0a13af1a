use serde::{Deserialize, Serialize};

/// Token id in a [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Fixed synthetic vocabulary: `n_obj` object tokens at ids `0..n_obj`,
/// followed by eight function tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    n_obj: u32,
}

const N_FUNCTION: u32 = 8;

impl Vocab {
    pub fn new(n_obj: usize) -> Self {
        Self { n_obj: n_obj as u32 }
    }

    pub fn n_objects(&self) -> usize {
        self.n_obj as usize
    }

    pub fn size(&self) -> usize {
        (self.n_obj + N_FUNCTION) as usize
    }

    pub fn object(&self, i: usize) -> Token {
        assert!(i < self.n_objects(), "object index {i} out of range");
        Token(i as u32)
    }

    pub fn objects(&self) -> impl Iterator<Item = Token> {
        (0..self.n_obj).map(Token)
    }

    pub fn is_object(&self, t: Token) -> bool {
        t.0 < self.n_obj
    }

    pub fn contains(&self, t: Token) -> bool {
        (t.0 as usize) < self.size()
    }

    pub fn bos(&self) -> Token {
        Token(self.n_obj)
    }

    pub fn eos(&self) -> Token {
        Token(self.n_obj + 1)
    }

    /// Marks a yes/no existence question.
    pub fn sep(&self) -> Token {
        Token(self.n_obj + 2)
    }

    pub fn and(&self) -> Token {
        Token(self.n_obj + 3)
    }

    pub fn prompt_standard(&self) -> Token {
        Token(self.n_obj + 4)
    }

    /// Distribution-shift prompt standing in for an exhaustive-listing instruction.
    pub fn prompt_exhaustive(&self) -> Token {
        Token(self.n_obj + 5)
    }

    pub fn yes(&self) -> Token {
        Token(self.n_obj + 6)
    }

    pub fn no(&self) -> Token {
        Token(self.n_obj + 7)
    }

    pub fn describe(&self, t: Token) -> String {
        if self.is_object(t) {
            return format!("obj{}", t.0);
        }
        match t.0 - self.n_obj {
            0 => "<bos>",
            1 => "<eos>",
            2 => "<sep>",
            3 => "and",
            4 => "<describe>",
            5 => "<list-all>",
            6 => "yes",
            7 => "no",
            _ => "<unk>",
        }
        .to_string()
    }
}
