use clap::ValueEnum;
use hla_core::{
    ahla_chunked_forward, ahla_forward, hla2_chunked_forward, hla2_forward, hla2_unmasked_forward,
    hla3_forward, linear_attention_identity, oracle_ahla, oracle_hla2, oracle_hla3, KernelConfig,
    OutputBatch, Result, TokenBatch,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kernel {
    Hla2,
    Hla2Unmasked,
    Hla2Chunked,
    Ahla,
    AhlaChunked,
    Hla3,
    OracleHla2,
    OracleAhla,
    OracleHla3,
    LinattnIdentity,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Hla2 => "hla2",
            Kernel::Hla2Unmasked => "hla2-unmasked",
            Kernel::Hla2Chunked => "hla2-chunked",
            Kernel::Ahla => "ahla",
            Kernel::AhlaChunked => "ahla-chunked",
            Kernel::Hla3 => "hla3",
            Kernel::OracleHla2 => "oracle-hla2",
            Kernel::OracleAhla => "oracle-ahla",
            Kernel::OracleHla3 => "oracle-hla3",
            Kernel::LinattnIdentity => "linattn-identity",
        }
    }

    pub fn run(self, batch: &TokenBatch, cfg: &KernelConfig) -> Result<OutputBatch> {
        match self {
            Kernel::Hla2 => hla2_forward(batch, cfg),
            Kernel::Hla2Unmasked => hla2_unmasked_forward(batch, cfg),
            Kernel::Hla2Chunked => hla2_chunked_forward(batch, cfg),
            Kernel::Ahla => ahla_forward(batch, cfg),
            Kernel::AhlaChunked => ahla_chunked_forward(batch, cfg),
            Kernel::Hla3 => hla3_forward(batch, cfg),
            Kernel::OracleHla2 => oracle_hla2(batch, cfg),
            Kernel::OracleAhla => oracle_ahla(batch, cfg),
            Kernel::OracleHla3 => oracle_hla3(batch, cfg),
            Kernel::LinattnIdentity => linear_attention_identity(batch, cfg),
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
