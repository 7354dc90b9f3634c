use serde::{Deserialize, Serialize};

#[derive(clap::ValueEnum, Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Human,
    /// One JSON document per command on stdout.
    Structured,
}

/// Prints `human` or the JSON form of `value`.
pub fn emit<T: Serialize>(format: Format, value: &T, human: impl FnOnce() -> String) {
    match format {
        Format::Human => {
            let text = human();
            if text.ends_with('\n') {
                print!("{text}");
            } else {
                println!("{text}");
            }
        }
        Format::Structured => println!("{}", serde_json::to_string(value).expect("output serializes")),
    }
}
