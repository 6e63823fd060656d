use std::fmt;

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration, arguments, or a refused overwrite.
    Config(String),
    /// An earlier phase's output is missing or stale.
    Prerequisite(String),
    /// Non-finite values during training or a degenerate statistic.
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Prerequisite(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Prerequisite(_) => "prerequisite",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Prerequisite(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

/// `error[kind]: message` on one line.
impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: Vec<&str> = self.message().lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        write!(f, "error[{}]: {}", self.kind(), flat.join(" "))
    }
}

impl std::error::Error for CliError {}

impl From<lslo_core::Error> for CliError {
    fn from(e: lslo_core::Error) -> Self {
        use lslo_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Argument(_) | E::Plan(_) | E::Routing { .. } => CliError::Config(msg),
            E::Num(_) | E::Numerical(_) | E::Degenerate(_) => CliError::Numerical(msg),
            E::Format(_) => CliError::Prerequisite(msg),
            E::Io(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
