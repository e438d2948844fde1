//! Annotation prompts and the `TWEET - BIO` input rendering.

use crate::corpus::{Instance, Language};

use super::LabelerError;

/// Rainbow flag: white flag, variation selector, zero-width joiner, rainbow.
pub const LGBTQ_FLAG: &str = "\u{1F3F3}\u{FE0F}\u{200D}\u{1F308}";

const FLAG_PLACEHOLDER: &str = "[LGBTQ+ flag]";

const ITALIAN: &str = "Sei un annotatore per un task di classificazione.
In input riceverai la bio di un utente Twitter e alcuni suoi tweet
Il tuo compito è decidere se l'utente in questione fa parte o meno della comunità LGBT.
Basa la tua scelta sul modo di scrivere, sul contenuto della bio e dei tweet, e su tutti i fattori che ritieni rilevanti.
L'input che ti fornirò sarà nel formato TWEET - BIO.

L'output che voglio è semplicemente un numero:
0 se l'utente NON appartiene alla comunità LGBT,
1 se invece appartiene alla comunità.

Esempio di interazione:
INPUT: \"fuck gender rules and the rules of society || bts || exo\" - \"pansexual, genderqueer and polyamorous [LGBTQ+ flag] || she/her || unito dams\"
OUTPUT: 1";

const SPANISH: &str = "Eres un anotador para una tarea de clasificación.
En la entrada recibirás la biografía de un usuario de Twitter y algunos de sus tuits.
Tu tarea es decidir si el usuario en cuestión forma parte o no de la comunidad LGBT.
Basarás tu decisión en la forma de escribir, el contenido de la biografía y de los tuits, y en todos los factores que consideres relevantes.
La entrada que te proporcionaré tendrá el formato TWEET - BIO.

La salida que quiero es simplemente un número:
0 si el usuario NO pertenece a la comunidad LGBT,
1 si sí pertenece a la comunidad.

Ejemplo de interacción:
ENTRADA: \"fuck gender rules and the rules of society || bts || exo\" - \"pansexual, genderqueer and polyamorous [LGBTQ+ flag] || she/her || unito dams\"
SALIDA: 1";

/// Appended on retries after a non-conforming answer.
const ITALIAN_RETRY: &str = "Rispondi con una sola cifra: 0 oppure 1.";
const SPANISH_RETRY: &str = "Responde con un solo dígito: 0 o 1.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub language: Language,
    text: String,
}

impl PromptTemplate {
    pub fn for_language(language: Language) -> Self {
        let raw = match language {
            Language::It => ITALIAN,
            Language::Es => SPANISH,
        };
        Self {
            language,
            text: raw.replace(FLAG_PLACEHOLDER, LGBTQ_FLAG),
        }
    }

    /// Instruction text with the flag placeholder already substituted.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn retry_suffix(&self) -> &'static str {
        match self.language {
            Language::It => ITALIAN_RETRY,
            Language::Es => SPANISH_RETRY,
        }
    }

    /// Everything before the rendered instance.
    pub fn prefix(&self) -> String {
        format!("{}\n\n", self.text)
    }
}

fn quote(field: &str) -> String {
    let mut out = String::with_capacity(field.len() + 2);
    out.push('"');
    for c in field.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// `"<tweet>" - "<bio>"`, with `"` and `\` backslash-escaped inside each field.
pub fn render_pair(tweet: &str, bio: &str) -> String {
    format!("{} - {}", quote(tweet), quote(bio))
}

pub fn render_prompt(
    template: &PromptTemplate,
    instance: &Instance,
) -> Result<String, LabelerError> {
    if template.language != instance.language {
        return Err(LabelerError::LanguageMismatch {
            template: template.language,
            instance: instance.language,
        });
    }
    Ok(format!(
        "{}{}",
        template.prefix(),
        render_pair(&instance.tweet, &instance.bio)
    ))
}

pub(crate) fn with_retry_suffix(template: &PromptTemplate, prompt: &str) -> String {
    format!("{prompt}\n\n{}", template.retry_suffix())
}

/// Recovers `(tweet, bio)` from a string produced by [`render_pair`].
pub fn split_rendered_pair(rendered: &str) -> Option<(String, String)> {
    let (tweet, rest) = unquote(rendered)?;
    let rest = rest.strip_prefix(" - ")?;
    let (bio, rest) = unquote(rest)?;
    rest.is_empty().then_some((tweet, bio))
}

fn unquote(s: &str) -> Option<(String, &str)> {
    let body = s.strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = body.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '\\' => out.push(chars.next()?.1),
            '"' => return Some((out, &body[i + 1..])),
            c => out.push(c),
        }
    }
    None
}
