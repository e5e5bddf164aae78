//! Reference execution backend: a validating interpreter for the integer
//! subset of WebAssembly the fixtures use.
//!
//! Function bodies are translated once into a flat instruction vector with
//! resolved branch targets and static operand-stack heights. While running,
//! the interpreter counts retired instructions, loads, stores and branches;
//! those counts back the software counter provider.
//!
//! Counting rules: every executed operator counts as one instruction except
//! the structural `block`, `loop`, `else` and `end` markers. `br`, `br_if`,
//! `br_table`, `if`, `call` and `return` are branches; `br_if` and `if` are
//! conditional branches whether or not they are taken.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wasmparser::{
    BlockType, CompositeInnerType, DataKind, ExternalKind, FunctionBody, Operator, Parser, Payload, TypeRef,
    ValType, Validator, WasmFeatures,
};

use super::memory::{GuestMemory, WASM_PAGE_SIZE};
use crate::abi;

const MAX_VALUE_STACK: usize = 1 << 20;
const MAX_FRAMES: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecCounters {
    pub instructions: u64,
    pub loads: u64,
    pub stores: u64,
    pub branches: u64,
    pub conditional_branches: u64,
}

impl ExecCounters {
    pub fn delta(&self, since: &ExecCounters) -> ExecCounters {
        ExecCounters {
            instructions: self.instructions - since.instructions,
            loads: self.loads - since.loads,
            stores: self.stores - since.stores,
            branches: self.branches - since.branches,
            conditional_branches: self.conditional_branches - since.conditional_branches,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Trap {
    #[error("unreachable executed")]
    Unreachable,
    #[error("out-of-bounds memory access")]
    MemoryOutOfBounds,
    #[error("integer divide by zero")]
    DivisionByZero,
    #[error("integer overflow")]
    IntegerOverflow,
    #[error("call stack exhausted")]
    StackExhausted,
    #[error("kernel connection lost")]
    KernelGone,
    #[error("host error: {0}")]
    Host(String),
    /// Not a fault: the guest asked to terminate with this code.
    #[error("exit({0})")]
    Exit(i32),
}

/// The host side of the single imported function.
pub trait SyscallHandler {
    fn syscall(&mut self, memory: &mut GuestMemory, no: u32, args: [i64; 6]) -> Result<i64, Trap>;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("invalid module: {0}")]
    Invalid(String),
    #[error("unsupported import {module}.{name}")]
    UnsupportedImport { module: String, name: String },
    #[error("unsupported feature: {0}")]
    Unsupported(String),
}

impl From<wasmparser::BinaryReaderError> for CompileError {
    fn from(e: wasmparser::BinaryReaderError) -> Self {
        CompileError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sig {
    params: u32,
    results: u32,
}

#[derive(Debug, Clone, Copy)]
struct BrTarget {
    pc: u32,
    height: u32,
    keep: u32,
}

#[derive(Debug, Clone, Copy)]
enum Load {
    I32,
    I64,
    I32_8S,
    I32_8U,
    I32_16S,
    I32_16U,
    I64_8S,
    I64_8U,
    I64_16S,
    I64_16U,
    I64_32S,
    I64_32U,
}

#[derive(Debug, Clone, Copy)]
enum Store {
    I32,
    I64,
    B8,
    B16,
    B32,
}

#[derive(Debug, Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    DivS,
    DivU,
    RemS,
    RemU,
    And,
    Or,
    Xor,
    Shl,
    ShrS,
    ShrU,
    Rotl,
    Rotr,
}

#[derive(Debug, Clone, Copy)]
enum Cmp {
    Eq,
    Ne,
    LtS,
    LtU,
    GtS,
    GtU,
    LeS,
    LeU,
    GeS,
    GeU,
}

#[derive(Debug, Clone, Copy)]
enum Un {
    Clz,
    Ctz,
    Popcnt,
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Unreachable,
    Nop,
    /// Structural jump emitted for `else`; not counted.
    Jump(u32),
    /// Implicit return at the final `end`; not counted.
    End,
    Br(BrTarget),
    BrIf(BrTarget),
    BrTable(u32),
    /// Pops the condition; jumps to the operand when it is zero.
    If(u32),
    Return,
    Call(u32),
    Drop,
    Select,
    LocalGet(u32),
    LocalSet(u32),
    LocalTee(u32),
    GlobalGet(u32),
    GlobalSet(u32),
    Load(Load, u32),
    Store(Store, u32),
    MemorySize,
    MemoryGrow,
    MemoryFill,
    MemoryCopy,
    Const(u64),
    Eqz32,
    Eqz64,
    Cmp32(Cmp),
    Cmp64(Cmp),
    Bin32(Bin),
    Bin64(Bin),
    Un32(Un),
    Un64(Un),
    Wrap,
    ExtendS,
    ExtendU,
    Ext32From8,
    Ext32From16,
    Ext64From8,
    Ext64From16,
    Ext64From32,
}

#[derive(Debug)]
struct Body {
    sig: Sig,
    /// Parameters plus declared locals.
    locals: u32,
    code: Vec<Instr>,
    tables: Vec<Vec<BrTarget>>,
}

#[derive(Debug)]
enum Func {
    Syscall,
    Defined(Body),
}

/// A validated, translated module ready for instantiation.
#[derive(Debug)]
pub struct CompiledModule {
    funcs: Vec<Func>,
    globals: Vec<u64>,
    memory_pages: usize,
    data: Vec<(usize, Vec<u8>)>,
    entry: u32,
}

impl CompiledModule {
    pub fn memory_pages(&self) -> usize {
        self.memory_pages
    }

    pub(crate) fn initial_globals(&self) -> Vec<u64> {
        self.globals.clone()
    }

    /// Allocates linear memory and applies active data segments.
    pub(crate) fn initial_memory(&self) -> GuestMemory {
        let mut mem = GuestMemory::new(self.memory_pages);
        for (offset, bytes) in &self.data {
            mem.write(*offset as u64, bytes)
                .expect("data segments are bounds-checked at compile time");
        }
        mem
    }
}

fn value_type_ok(t: &ValType) -> bool {
    matches!(t, ValType::I32 | ValType::I64)
}

fn syscall_sig_ok(params: &[ValType], results: &[ValType]) -> bool {
    params.len() == 7
        && params[0] == ValType::I32
        && params[1..].iter().all(|t| *t == ValType::I64)
        && results == [ValType::I64]
}

fn eval_const(expr: &wasmparser::ConstExpr<'_>, globals: &[u64]) -> Result<u64, CompileError> {
    let mut reader = expr.get_operators_reader();
    let mut value = None;
    while !reader.eof() {
        match reader.read()? {
            Operator::I32Const { value: v } => value = Some(v as u32 as u64),
            Operator::I64Const { value: v } => value = Some(v as u64),
            Operator::GlobalGet { global_index } => {
                value =
                    Some(*globals.get(global_index as usize).ok_or_else(|| {
                        CompileError::Invalid(format!("global {global_index} not yet defined"))
                    })?)
            }
            Operator::End => break,
            other => {
                return Err(CompileError::Unsupported(format!(
                    "constant expression operator {other:?}"
                )))
            }
        }
    }
    value.ok_or_else(|| CompileError::Invalid("empty constant expression".into()))
}

/// Validates `bytes`, checks the import/export contract, and translates
/// every function body.
pub fn compile(bytes: &[u8]) -> Result<CompiledModule, CompileError> {
    Validator::new_with_features(WasmFeatures::default())
        .validate_all(bytes)
        .map_err(|e| CompileError::Invalid(e.to_string()))?;

    let mut types: Vec<Option<Sig>> = Vec::new();
    let mut syscall_types: Vec<bool> = Vec::new();
    let mut func_types: Vec<u32> = Vec::new();
    let mut num_imports = 0usize;
    let mut memory_pages = None;
    let mut globals = Vec::new();
    let mut entry = None;
    let mut memory_exported = false;
    let mut data = Vec::new();
    let mut bodies: Vec<FunctionBody<'_>> = Vec::new();

    for payload in Parser::new(0).parse_all(bytes) {
        match payload? {
            Payload::TypeSection(reader) => {
                for group in reader {
                    for sub in group?.into_types() {
                        syscall_types.push(matches!(
                            &sub.composite_type.inner,
                            CompositeInnerType::Func(f) if syscall_sig_ok(f.params(), f.results())
                        ));
                        types.push(match &sub.composite_type.inner {
                            CompositeInnerType::Func(f)
                                if f.params().iter().chain(f.results()).all(value_type_ok) =>
                            {
                                Some(Sig {
                                    params: f.params().len() as u32,
                                    results: f.results().len() as u32,
                                })
                            }
                            // Kept as a hole; using it is rejected below.
                            _ => None,
                        });
                    }
                }
            }
            Payload::ImportSection(reader) => {
                for import in reader.into_imports() {
                    let import = import?;
                    let unsupported = || CompileError::UnsupportedImport {
                        module: import.module.to_string(),
                        name: import.name.to_string(),
                    };
                    if import.module != abi::ABI_NAMESPACE || import.name != abi::SYSCALL_IMPORT {
                        return Err(unsupported());
                    }
                    match import.ty {
                        TypeRef::Func(t) | TypeRef::FuncExact(t) => {
                            if !syscall_types.get(t as usize).copied().unwrap_or(false) {
                                return Err(unsupported());
                            }
                            func_types.push(t);
                            num_imports += 1;
                        }
                        _ => return Err(unsupported()),
                    }
                }
            }
            Payload::FunctionSection(reader) => {
                for t in reader {
                    func_types.push(t?);
                }
            }
            Payload::MemorySection(reader) => {
                for mem in reader {
                    let mem = mem?;
                    if memory_pages.is_some() || mem.memory64 || mem.shared {
                        return Err(CompileError::Unsupported(
                            "only a single 32-bit unshared memory".into(),
                        ));
                    }
                    memory_pages = Some(mem.initial as usize);
                }
            }
            Payload::GlobalSection(reader) => {
                for g in reader {
                    let g = g?;
                    if !value_type_ok(&g.ty.content_type) {
                        return Err(CompileError::Unsupported(format!(
                            "global of type {:?}",
                            g.ty.content_type
                        )));
                    }
                    let v = eval_const(&g.init_expr, &globals)?;
                    globals.push(v);
                }
            }
            Payload::ExportSection(reader) => {
                for export in reader {
                    let export = export?;
                    match (export.kind, export.name) {
                        (ExternalKind::Func, abi::ENTRY_EXPORT) => entry = Some(export.index),
                        (ExternalKind::Memory, abi::MEMORY_EXPORT) => memory_exported = true,
                        _ => {}
                    }
                }
            }
            Payload::StartSection { .. } => {
                return Err(CompileError::Unsupported(
                    "start functions run guest code at instantiation".into(),
                ))
            }
            Payload::DataSection(reader) => {
                for seg in reader {
                    let seg = seg?;
                    match seg.kind {
                        DataKind::Active { offset_expr, .. } => {
                            let off = eval_const(&offset_expr, &globals)? as u32 as usize;
                            data.push((off, seg.data.to_vec()));
                        }
                        DataKind::Passive => {
                            return Err(CompileError::Unsupported("passive data segments".into()))
                        }
                    }
                }
            }
            Payload::CodeSectionEntry(body) => bodies.push(body),
            _ => {}
        }
    }

    let memory_pages =
        memory_pages.ok_or_else(|| CompileError::Invalid("module defines no linear memory".into()))?;
    if !memory_exported {
        return Err(CompileError::Invalid(format!(
            "linear memory is not exported as \"{}\"",
            abi::MEMORY_EXPORT
        )));
    }
    let entry =
        entry.ok_or_else(|| CompileError::Invalid(format!("missing \"{}\" export", abi::ENTRY_EXPORT)))?;
    let mem_size = memory_pages * WASM_PAGE_SIZE;
    for (off, bytes) in &data {
        if off + bytes.len() > mem_size {
            return Err(CompileError::Invalid("data segment out of bounds".into()));
        }
    }

    let sig_of = |t: u32| -> Result<Sig, CompileError> {
        types
            .get(t as usize)
            .copied()
            .flatten()
            .ok_or_else(|| CompileError::Unsupported("non-integer function type".into()))
    };
    let func_sigs: Vec<Sig> = func_types.iter().map(|t| sig_of(*t)).collect::<Result<_, _>>()?;
    if func_sigs.get(entry as usize)
        != Some(&Sig {
            params: 0,
            results: 0,
        })
        || (entry as usize) < num_imports
    {
        return Err(CompileError::Invalid(format!(
            "\"{}\" must be a defined function of type [] -> []",
            abi::ENTRY_EXPORT
        )));
    }

    let type_sigs: Vec<Option<Sig>> = types.clone();
    let mut funcs: Vec<Func> = (0..num_imports).map(|_| Func::Syscall).collect();
    for (i, body) in bodies.into_iter().enumerate() {
        let sig = func_sigs[num_imports + i];
        funcs.push(Func::Defined(translate(&body, sig, &type_sigs, &func_sigs)?));
    }

    Ok(CompiledModule {
        funcs,
        globals,
        memory_pages,
        data,
        entry,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CtrlKind {
    Func,
    Block,
    Loop,
    If,
    Else,
}

#[derive(Debug, Clone, Copy)]
enum Fixup {
    Jump(usize),
    Br(usize),
    BrIf(usize),
    Table(usize, usize),
}

#[derive(Debug)]
struct Ctrl {
    kind: CtrlKind,
    height: u32,
    params: u32,
    results: u32,
    loop_pc: u32,
    if_instr: Option<usize>,
    fixups: Vec<Fixup>,
    /// Code after an unconditional transfer is not emitted.
    dead: bool,
    /// The whole construct sits in dead code.
    entered_dead: bool,
}

impl Ctrl {
    fn label_arity(&self) -> u32 {
        if self.kind == CtrlKind::Loop {
            self.params
        } else {
            self.results
        }
    }
}

struct Translator<'a> {
    type_sigs: &'a [Option<Sig>],
    func_sigs: &'a [Sig],
    code: Vec<Instr>,
    tables: Vec<Vec<BrTarget>>,
    ctrl: Vec<Ctrl>,
    height: u32,
}

impl<'a> Translator<'a> {
    fn block_arity(&self, bt: BlockType) -> Result<(u32, u32), CompileError> {
        Ok(match bt {
            BlockType::Empty => (0, 0),
            BlockType::Type(t) if value_type_ok(&t) => (0, 1),
            BlockType::Type(t) => return Err(CompileError::Unsupported(format!("block of type {t:?}"))),
            BlockType::FuncType(i) => {
                let sig = self
                    .type_sigs
                    .get(i as usize)
                    .copied()
                    .flatten()
                    .ok_or_else(|| CompileError::Unsupported("non-integer block type".into()))?;
                (sig.params, sig.results)
            }
        })
    }

    fn dead(&self) -> bool {
        self.ctrl.last().is_some_and(|c| c.dead)
    }

    fn set_dead(&mut self) {
        if let Some(c) = self.ctrl.last_mut() {
            c.dead = true;
        }
    }

    fn pc(&self) -> u32 {
        self.code.len() as u32
    }

    fn emit(&mut self, i: Instr) -> usize {
        self.code.push(i);
        self.code.len() - 1
    }

    fn push_ctrl(&mut self, kind: CtrlKind, params: u32, results: u32) {
        let entered_dead = self.dead();
        self.ctrl.push(Ctrl {
            kind,
            height: self.height.saturating_sub(params),
            params,
            results,
            loop_pc: self.pc(),
            if_instr: None,
            fixups: Vec::new(),
            dead: entered_dead,
            entered_dead,
        });
    }

    /// Branch target for relative `depth`; forward targets get `pc = 0`
    /// until the label's `end` is reached.
    fn target(&self, depth: u32) -> (BrTarget, Option<usize>) {
        let idx = self.ctrl.len() - 1 - depth as usize;
        let c = &self.ctrl[idx];
        let t = BrTarget {
            pc: if c.kind == CtrlKind::Loop { c.loop_pc } else { 0 },
            height: c.height,
            keep: c.label_arity(),
        };
        (t, (c.kind != CtrlKind::Loop).then_some(idx))
    }

    fn patch(&mut self, fixup: Fixup, pc: u32) {
        match fixup {
            Fixup::Jump(i) => self.code[i] = Instr::Jump(pc),
            Fixup::Br(i) => {
                if let Instr::Br(t) = &mut self.code[i] {
                    t.pc = pc;
                }
            }
            Fixup::BrIf(i) => {
                if let Instr::BrIf(t) = &mut self.code[i] {
                    t.pc = pc;
                }
            }
            Fixup::Table(t, e) => self.tables[t][e].pc = pc,
        }
    }

    fn op(&mut self, op: Operator<'_>) -> Result<(), CompileError> {
        use Operator as O;
        if self.dead() {
            match op {
                O::Block { .. } | O::Loop { .. } | O::If { .. } => {
                    self.push_ctrl(CtrlKind::Block, 0, 0);
                    return Ok(());
                }
                O::Else | O::End if self.ctrl.last().is_some_and(|c| c.entered_dead) => {
                    if matches!(op, O::End) {
                        self.ctrl.pop();
                    }
                    return Ok(());
                }
                O::Else | O::End => {}
                _ => return Ok(()),
            }
        }

        match op {
            O::Unreachable => {
                self.emit(Instr::Unreachable);
                self.set_dead();
            }
            O::Nop => {
                self.emit(Instr::Nop);
            }
            O::Block { blockty } => {
                let (p, r) = self.block_arity(blockty)?;
                self.push_ctrl(CtrlKind::Block, p, r);
            }
            O::Loop { blockty } => {
                let (p, r) = self.block_arity(blockty)?;
                self.push_ctrl(CtrlKind::Loop, p, r);
            }
            O::If { blockty } => {
                let (p, r) = self.block_arity(blockty)?;
                self.height -= 1;
                let at = self.emit(Instr::If(0));
                self.push_ctrl(CtrlKind::If, p, r);
                self.ctrl.last_mut().expect("just pushed").if_instr = Some(at);
            }
            O::Else => {
                let jump = self.emit(Instr::Jump(0));
                let pc = self.pc();
                let c = self.ctrl.last_mut().expect("validated else");
                c.fixups.push(Fixup::Jump(jump));
                let if_at = c.if_instr.take().expect("else follows if");
                c.kind = CtrlKind::Else;
                c.dead = false;
                self.height = c.height + c.params;
                self.code[if_at] = Instr::If(pc);
            }
            O::End => {
                let c = self.ctrl.pop().expect("validated end");
                if c.kind == CtrlKind::Func {
                    let pc = self.pc();
                    self.emit(Instr::End);
                    for f in c.fixups {
                        self.patch(f, pc);
                    }
                } else {
                    let pc = self.pc();
                    for f in c.fixups {
                        self.patch(f, pc);
                    }
                    if let Some(if_at) = c.if_instr {
                        self.code[if_at] = Instr::If(pc);
                    }
                }
                self.height = c.height + c.results;
            }
            O::Br { relative_depth } => {
                let (t, fix) = self.target(relative_depth);
                let at = self.emit(Instr::Br(t));
                if let Some(idx) = fix {
                    self.ctrl[idx].fixups.push(Fixup::Br(at));
                }
                self.set_dead();
            }
            O::BrIf { relative_depth } => {
                self.height -= 1;
                let (t, fix) = self.target(relative_depth);
                let at = self.emit(Instr::BrIf(t));
                if let Some(idx) = fix {
                    self.ctrl[idx].fixups.push(Fixup::BrIf(at));
                }
            }
            O::BrTable { targets } => {
                self.height -= 1;
                let mut depths = targets.targets().collect::<Result<Vec<u32>, _>>()?;
                depths.push(targets.default());
                let table_idx = self.tables.len();
                let mut entries = Vec::with_capacity(depths.len());
                let mut fixes = Vec::new();
                for (e, d) in depths.into_iter().enumerate() {
                    let (t, fix) = self.target(d);
                    entries.push(t);
                    if let Some(idx) = fix {
                        fixes.push((idx, e));
                    }
                }
                self.tables.push(entries);
                for (idx, e) in fixes {
                    self.ctrl[idx].fixups.push(Fixup::Table(table_idx, e));
                }
                self.emit(Instr::BrTable(table_idx as u32));
                self.set_dead();
            }
            O::Return => {
                self.emit(Instr::Return);
                self.set_dead();
            }
            O::Call { function_index } => {
                let sig = self.func_sigs[function_index as usize];
                self.height = self.height - sig.params + sig.results;
                self.emit(Instr::Call(function_index));
            }
            O::Drop => {
                self.height -= 1;
                self.emit(Instr::Drop);
            }
            O::Select => {
                self.height -= 2;
                self.emit(Instr::Select);
            }
            O::TypedSelect { ty } if value_type_ok(&ty) => {
                self.height -= 2;
                self.emit(Instr::Select);
            }
            O::LocalGet { local_index } => {
                self.height += 1;
                self.emit(Instr::LocalGet(local_index));
            }
            O::LocalSet { local_index } => {
                self.height -= 1;
                self.emit(Instr::LocalSet(local_index));
            }
            O::LocalTee { local_index } => {
                self.emit(Instr::LocalTee(local_index));
            }
            O::GlobalGet { global_index } => {
                self.height += 1;
                self.emit(Instr::GlobalGet(global_index));
            }
            O::GlobalSet { global_index } => {
                self.height -= 1;
                self.emit(Instr::GlobalSet(global_index));
            }
            O::I32Load { memarg } => self.load(Load::I32, memarg.offset),
            O::I64Load { memarg } => self.load(Load::I64, memarg.offset),
            O::I32Load8S { memarg } => self.load(Load::I32_8S, memarg.offset),
            O::I32Load8U { memarg } => self.load(Load::I32_8U, memarg.offset),
            O::I32Load16S { memarg } => self.load(Load::I32_16S, memarg.offset),
            O::I32Load16U { memarg } => self.load(Load::I32_16U, memarg.offset),
            O::I64Load8S { memarg } => self.load(Load::I64_8S, memarg.offset),
            O::I64Load8U { memarg } => self.load(Load::I64_8U, memarg.offset),
            O::I64Load16S { memarg } => self.load(Load::I64_16S, memarg.offset),
            O::I64Load16U { memarg } => self.load(Load::I64_16U, memarg.offset),
            O::I64Load32S { memarg } => self.load(Load::I64_32S, memarg.offset),
            O::I64Load32U { memarg } => self.load(Load::I64_32U, memarg.offset),
            O::I32Store { memarg } => self.store(Store::I32, memarg.offset),
            O::I64Store { memarg } => self.store(Store::I64, memarg.offset),
            O::I32Store8 { memarg } | O::I64Store8 { memarg } => self.store(Store::B8, memarg.offset),
            O::I32Store16 { memarg } | O::I64Store16 { memarg } => self.store(Store::B16, memarg.offset),
            O::I64Store32 { memarg } => self.store(Store::B32, memarg.offset),
            O::MemorySize { .. } => {
                self.height += 1;
                self.emit(Instr::MemorySize);
            }
            O::MemoryGrow { .. } => {
                self.emit(Instr::MemoryGrow);
            }
            O::MemoryFill { .. } => {
                self.height -= 3;
                self.emit(Instr::MemoryFill);
            }
            O::MemoryCopy { .. } => {
                self.height -= 3;
                self.emit(Instr::MemoryCopy);
            }
            O::I32Const { value } => {
                self.height += 1;
                self.emit(Instr::Const(value as u32 as u64));
            }
            O::I64Const { value } => {
                self.height += 1;
                self.emit(Instr::Const(value as u64));
            }
            O::I32Eqz => {
                self.emit(Instr::Eqz32);
            }
            O::I64Eqz => {
                self.emit(Instr::Eqz64);
            }
            O::I32Eq => self.cmp32(Cmp::Eq),
            O::I32Ne => self.cmp32(Cmp::Ne),
            O::I32LtS => self.cmp32(Cmp::LtS),
            O::I32LtU => self.cmp32(Cmp::LtU),
            O::I32GtS => self.cmp32(Cmp::GtS),
            O::I32GtU => self.cmp32(Cmp::GtU),
            O::I32LeS => self.cmp32(Cmp::LeS),
            O::I32LeU => self.cmp32(Cmp::LeU),
            O::I32GeS => self.cmp32(Cmp::GeS),
            O::I32GeU => self.cmp32(Cmp::GeU),
            O::I64Eq => self.cmp64(Cmp::Eq),
            O::I64Ne => self.cmp64(Cmp::Ne),
            O::I64LtS => self.cmp64(Cmp::LtS),
            O::I64LtU => self.cmp64(Cmp::LtU),
            O::I64GtS => self.cmp64(Cmp::GtS),
            O::I64GtU => self.cmp64(Cmp::GtU),
            O::I64LeS => self.cmp64(Cmp::LeS),
            O::I64LeU => self.cmp64(Cmp::LeU),
            O::I64GeS => self.cmp64(Cmp::GeS),
            O::I64GeU => self.cmp64(Cmp::GeU),
            O::I32Clz => self.unary(Instr::Un32(Un::Clz)),
            O::I32Ctz => self.unary(Instr::Un32(Un::Ctz)),
            O::I32Popcnt => self.unary(Instr::Un32(Un::Popcnt)),
            O::I64Clz => self.unary(Instr::Un64(Un::Clz)),
            O::I64Ctz => self.unary(Instr::Un64(Un::Ctz)),
            O::I64Popcnt => self.unary(Instr::Un64(Un::Popcnt)),
            O::I32Add => self.bin32(Bin::Add),
            O::I32Sub => self.bin32(Bin::Sub),
            O::I32Mul => self.bin32(Bin::Mul),
            O::I32DivS => self.bin32(Bin::DivS),
            O::I32DivU => self.bin32(Bin::DivU),
            O::I32RemS => self.bin32(Bin::RemS),
            O::I32RemU => self.bin32(Bin::RemU),
            O::I32And => self.bin32(Bin::And),
            O::I32Or => self.bin32(Bin::Or),
            O::I32Xor => self.bin32(Bin::Xor),
            O::I32Shl => self.bin32(Bin::Shl),
            O::I32ShrS => self.bin32(Bin::ShrS),
            O::I32ShrU => self.bin32(Bin::ShrU),
            O::I32Rotl => self.bin32(Bin::Rotl),
            O::I32Rotr => self.bin32(Bin::Rotr),
            O::I64Add => self.bin64(Bin::Add),
            O::I64Sub => self.bin64(Bin::Sub),
            O::I64Mul => self.bin64(Bin::Mul),
            O::I64DivS => self.bin64(Bin::DivS),
            O::I64DivU => self.bin64(Bin::DivU),
            O::I64RemS => self.bin64(Bin::RemS),
            O::I64RemU => self.bin64(Bin::RemU),
            O::I64And => self.bin64(Bin::And),
            O::I64Or => self.bin64(Bin::Or),
            O::I64Xor => self.bin64(Bin::Xor),
            O::I64Shl => self.bin64(Bin::Shl),
            O::I64ShrS => self.bin64(Bin::ShrS),
            O::I64ShrU => self.bin64(Bin::ShrU),
            O::I64Rotl => self.bin64(Bin::Rotl),
            O::I64Rotr => self.bin64(Bin::Rotr),
            O::I32WrapI64 => self.unary(Instr::Wrap),
            O::I64ExtendI32S => self.unary(Instr::ExtendS),
            O::I64ExtendI32U => self.unary(Instr::ExtendU),
            O::I32Extend8S => self.unary(Instr::Ext32From8),
            O::I32Extend16S => self.unary(Instr::Ext32From16),
            O::I64Extend8S => self.unary(Instr::Ext64From8),
            O::I64Extend16S => self.unary(Instr::Ext64From16),
            O::I64Extend32S => self.unary(Instr::Ext64From32),
            other => {
                return Err(CompileError::Unsupported(format!("operator {other:?}")));
            }
        }
        Ok(())
    }

    fn load(&mut self, kind: Load, offset: u64) {
        self.emit(Instr::Load(kind, offset as u32));
    }

    fn store(&mut self, kind: Store, offset: u64) {
        self.height -= 2;
        self.emit(Instr::Store(kind, offset as u32));
    }

    fn cmp32(&mut self, c: Cmp) {
        self.height -= 1;
        self.emit(Instr::Cmp32(c));
    }

    fn cmp64(&mut self, c: Cmp) {
        self.height -= 1;
        self.emit(Instr::Cmp64(c));
    }

    fn bin32(&mut self, b: Bin) {
        self.height -= 1;
        self.emit(Instr::Bin32(b));
    }

    fn bin64(&mut self, b: Bin) {
        self.height -= 1;
        self.emit(Instr::Bin64(b));
    }

    fn unary(&mut self, i: Instr) {
        self.emit(i);
    }
}

fn translate(
    body: &FunctionBody<'_>,
    sig: Sig,
    type_sigs: &[Option<Sig>],
    func_sigs: &[Sig],
) -> Result<Body, CompileError> {
    let mut locals = sig.params;
    let mut reader = body.get_locals_reader()?;
    for _ in 0..reader.get_count() {
        let (count, ty) = reader.read()?;
        if !value_type_ok(&ty) {
            return Err(CompileError::Unsupported(format!("local of type {ty:?}")));
        }
        locals += count;
    }
    let mut t = Translator {
        type_sigs,
        func_sigs,
        code: Vec::new(),
        tables: Vec::new(),
        ctrl: Vec::new(),
        height: 0,
    };
    t.push_ctrl(CtrlKind::Func, 0, sig.results);
    let mut ops = body.get_operators_reader()?;
    while !ops.eof() {
        let op = ops.read()?;
        t.op(op)?;
    }
    Ok(Body {
        sig,
        locals,
        code: t.code,
        tables: t.tables,
    })
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    func: u32,
    pc: u32,
    locals_base: u32,
}

#[inline(always)]
fn pop(s: &mut Vec<u64>) -> u64 {
    s.pop().unwrap_or_default()
}

#[inline(always)]
fn top(s: &mut [u64]) -> &mut u64 {
    s.last_mut().expect("validated operand stack")
}

#[inline(always)]
fn effective(base: u64, offset: u32, size: usize, mem_len: usize) -> Result<usize, Trap> {
    let ea = (base as u32 as u64) + offset as u64;
    if ea + size as u64 > mem_len as u64 {
        return Err(Trap::MemoryOutOfBounds);
    }
    Ok(ea as usize)
}

fn bin32(op: Bin, a: u32, b: u32) -> Result<u32, Trap> {
    Ok(match op {
        Bin::Add => a.wrapping_add(b),
        Bin::Sub => a.wrapping_sub(b),
        Bin::Mul => a.wrapping_mul(b),
        Bin::DivS => {
            if b == 0 {
                return Err(Trap::DivisionByZero);
            }
            if a as i32 == i32::MIN && b as i32 == -1 {
                return Err(Trap::IntegerOverflow);
            }
            ((a as i32) / (b as i32)) as u32
        }
        Bin::DivU => a.checked_div(b).ok_or(Trap::DivisionByZero)?,
        Bin::RemS => {
            if b == 0 {
                return Err(Trap::DivisionByZero);
            }
            (a as i32).wrapping_rem(b as i32) as u32
        }
        Bin::RemU => a.checked_rem(b).ok_or(Trap::DivisionByZero)?,
        Bin::And => a & b,
        Bin::Or => a | b,
        Bin::Xor => a ^ b,
        Bin::Shl => a.wrapping_shl(b),
        Bin::ShrS => (a as i32).wrapping_shr(b) as u32,
        Bin::ShrU => a.wrapping_shr(b),
        Bin::Rotl => a.rotate_left(b % 32),
        Bin::Rotr => a.rotate_right(b % 32),
    })
}

fn bin64(op: Bin, a: u64, b: u64) -> Result<u64, Trap> {
    Ok(match op {
        Bin::Add => a.wrapping_add(b),
        Bin::Sub => a.wrapping_sub(b),
        Bin::Mul => a.wrapping_mul(b),
        Bin::DivS => {
            if b == 0 {
                return Err(Trap::DivisionByZero);
            }
            if a as i64 == i64::MIN && b as i64 == -1 {
                return Err(Trap::IntegerOverflow);
            }
            ((a as i64) / (b as i64)) as u64
        }
        Bin::DivU => a.checked_div(b).ok_or(Trap::DivisionByZero)?,
        Bin::RemS => {
            if b == 0 {
                return Err(Trap::DivisionByZero);
            }
            (a as i64).wrapping_rem(b as i64) as u64
        }
        Bin::RemU => a.checked_rem(b).ok_or(Trap::DivisionByZero)?,
        Bin::And => a & b,
        Bin::Or => a | b,
        Bin::Xor => a ^ b,
        Bin::Shl => a.wrapping_shl(b as u32),
        Bin::ShrS => (a as i64).wrapping_shr(b as u32) as u64,
        Bin::ShrU => a.wrapping_shr(b as u32),
        Bin::Rotl => a.rotate_left((b % 64) as u32),
        Bin::Rotr => a.rotate_right((b % 64) as u32),
    })
}

fn cmp32(op: Cmp, a: u32, b: u32) -> bool {
    let (sa, sb) = (a as i32, b as i32);
    match op {
        Cmp::Eq => a == b,
        Cmp::Ne => a != b,
        Cmp::LtS => sa < sb,
        Cmp::LtU => a < b,
        Cmp::GtS => sa > sb,
        Cmp::GtU => a > b,
        Cmp::LeS => sa <= sb,
        Cmp::LeU => a <= b,
        Cmp::GeS => sa >= sb,
        Cmp::GeU => a >= b,
    }
}

fn cmp64(op: Cmp, a: u64, b: u64) -> bool {
    let (sa, sb) = (a as i64, b as i64);
    match op {
        Cmp::Eq => a == b,
        Cmp::Ne => a != b,
        Cmp::LtS => sa < sb,
        Cmp::LtU => a < b,
        Cmp::GtS => sa > sb,
        Cmp::GtU => a > b,
        Cmp::LeS => sa <= sb,
        Cmp::LeU => a <= b,
        Cmp::GeS => sa >= sb,
        Cmp::GeU => a >= b,
    }
}

/// Mutable per-instance execution state.
#[derive(Debug)]
pub struct Machine {
    pub memory: GuestMemory,
    pub globals: Vec<u64>,
    pub counters: ExecCounters,
}

impl Machine {
    /// Runs the module's entry function to completion.
    pub fn run_entry(&mut self, module: &CompiledModule, host: &mut dyn SyscallHandler) -> Result<(), Trap> {
        self.invoke(module, module.entry, host)
    }

    fn invoke(
        &mut self,
        module: &CompiledModule,
        func: u32,
        host: &mut dyn SyscallHandler,
    ) -> Result<(), Trap> {
        let body = match &module.funcs[func as usize] {
            Func::Defined(b) => b,
            Func::Syscall => return Err(Trap::Host("cannot invoke an import".into())),
        };
        let mut stack: Vec<u64> = Vec::with_capacity(1024);
        let mut frames: Vec<Frame> = Vec::new();
        stack.resize(body.locals as usize, 0);

        let mut cur = func;
        let mut code: &[Instr] = &body.code;
        let mut tables: &[Vec<BrTarget>] = &body.tables;
        let mut results = body.sig.results as usize;
        let mut locals_base = 0usize;
        let mut operand_base = body.locals as usize;
        let mut pc = 0usize;
        let c = &mut self.counters;
        let memory = &mut self.memory;
        let globals = &mut self.globals;

        macro_rules! branch {
            ($t:expr) => {{
                let t: BrTarget = $t;
                let keep = t.keep as usize;
                let dst = operand_base + t.height as usize;
                let src = stack.len() - keep;
                if dst != src {
                    stack.copy_within(src..src + keep, dst);
                }
                stack.truncate(dst + keep);
                pc = t.pc as usize;
            }};
        }

        macro_rules! load {
            ($off:expr, $n:literal, $conv:expr) => {{
                c.loads += 1;
                let base = pop(&mut stack);
                let bytes = memory.bytes();
                let ea = effective(base, $off, $n, bytes.len())?;
                let raw: [u8; $n] = bytes[ea..ea + $n].try_into().expect("sized");
                stack.push($conv(raw));
            }};
        }

        loop {
            let instr = code[pc];
            pc += 1;
            c.instructions += 1;
            match instr {
                Instr::Unreachable => return Err(Trap::Unreachable),
                Instr::Nop => {}
                Instr::Jump(t) => {
                    c.instructions -= 1;
                    pc = t as usize;
                }
                Instr::End | Instr::Return => {
                    if matches!(instr, Instr::End) {
                        c.instructions -= 1;
                    } else {
                        c.branches += 1;
                    }
                    let src = stack.len() - results;
                    stack.copy_within(src.., locals_base);
                    stack.truncate(locals_base + results);
                    match frames.pop() {
                        None => return Ok(()),
                        Some(f) => {
                            let Func::Defined(b) = &module.funcs[f.func as usize] else {
                                unreachable!("frames only hold defined functions")
                            };
                            cur = f.func;
                            code = &b.code;
                            tables = &b.tables;
                            results = b.sig.results as usize;
                            locals_base = f.locals_base as usize;
                            operand_base = locals_base + b.locals as usize;
                            pc = f.pc as usize;
                        }
                    }
                }
                Instr::Br(t) => {
                    c.branches += 1;
                    branch!(t);
                }
                Instr::BrIf(t) => {
                    c.branches += 1;
                    c.conditional_branches += 1;
                    if pop(&mut stack) as u32 != 0 {
                        branch!(t);
                    }
                }
                Instr::BrTable(idx) => {
                    c.branches += 1;
                    let table = &tables[idx as usize];
                    let i = pop(&mut stack) as u32 as usize;
                    let t = table[i.min(table.len() - 1)];
                    branch!(t);
                }
                Instr::If(else_pc) => {
                    c.branches += 1;
                    c.conditional_branches += 1;
                    if pop(&mut stack) as u32 == 0 {
                        pc = else_pc as usize;
                    }
                }
                Instr::Call(f) => {
                    c.branches += 1;
                    match &module.funcs[f as usize] {
                        Func::Syscall => {
                            let n = stack.len() - 7;
                            let no = stack[n] as u32;
                            let mut args = [0i64; 6];
                            for (slot, v) in args.iter_mut().zip(&stack[n + 1..]) {
                                *slot = *v as i64;
                            }
                            stack.truncate(n);
                            let r = host.syscall(memory, no, args)?;
                            stack.push(r as u64);
                        }
                        Func::Defined(b) => {
                            if frames.len() >= MAX_FRAMES || stack.len() + b.locals as usize > MAX_VALUE_STACK
                            {
                                return Err(Trap::StackExhausted);
                            }
                            frames.push(Frame {
                                func: cur,
                                pc: pc as u32,
                                locals_base: locals_base as u32,
                            });
                            locals_base = stack.len() - b.sig.params as usize;
                            stack.resize(locals_base + b.locals as usize, 0);
                            operand_base = stack.len();
                            cur = f;
                            code = &b.code;
                            tables = &b.tables;
                            results = b.sig.results as usize;
                            pc = 0;
                        }
                    }
                }
                Instr::Drop => {
                    stack.pop();
                }
                Instr::Select => {
                    let cond = pop(&mut stack) as u32;
                    let b = pop(&mut stack);
                    if cond == 0 {
                        *top(&mut stack) = b;
                    }
                }
                Instr::LocalGet(i) => {
                    let v = stack[locals_base + i as usize];
                    stack.push(v);
                }
                Instr::LocalSet(i) => {
                    let v = pop(&mut stack);
                    stack[locals_base + i as usize] = v;
                }
                Instr::LocalTee(i) => {
                    let v = *top(&mut stack);
                    stack[locals_base + i as usize] = v;
                }
                Instr::GlobalGet(i) => stack.push(globals[i as usize]),
                Instr::GlobalSet(i) => globals[i as usize] = pop(&mut stack),
                Instr::Load(kind, off) => match kind {
                    Load::I32 => load!(off, 4, |b| u32::from_le_bytes(b) as u64),
                    Load::I64 => load!(off, 8, u64::from_le_bytes),
                    Load::I32_8S => load!(off, 1, |b: [u8; 1]| b[0] as i8 as i32 as u32 as u64),
                    Load::I32_8U => load!(off, 1, |b: [u8; 1]| b[0] as u64),
                    Load::I32_16S => {
                        load!(off, 2, |b| i16::from_le_bytes(b) as i32 as u32 as u64)
                    }
                    Load::I32_16U => load!(off, 2, |b| u16::from_le_bytes(b) as u64),
                    Load::I64_8S => load!(off, 1, |b: [u8; 1]| b[0] as i8 as i64 as u64),
                    Load::I64_8U => load!(off, 1, |b: [u8; 1]| b[0] as u64),
                    Load::I64_16S => load!(off, 2, |b| i16::from_le_bytes(b) as i64 as u64),
                    Load::I64_16U => load!(off, 2, |b| u16::from_le_bytes(b) as u64),
                    Load::I64_32S => load!(off, 4, |b| i32::from_le_bytes(b) as i64 as u64),
                    Load::I64_32U => load!(off, 4, |b| u32::from_le_bytes(b) as u64),
                },
                Instr::Store(kind, off) => {
                    c.stores += 1;
                    let v = pop(&mut stack);
                    let base = pop(&mut stack);
                    let bytes = memory.bytes_mut();
                    let n = match kind {
                        Store::I32 | Store::B32 => 4,
                        Store::I64 => 8,
                        Store::B8 => 1,
                        Store::B16 => 2,
                    };
                    let ea = effective(base, off, n, bytes.len())?;
                    bytes[ea..ea + n].copy_from_slice(&v.to_le_bytes()[..n]);
                }
                Instr::MemorySize => stack.push(memory.pages() as u64),
                Instr::MemoryGrow => {
                    // Memory is fixed at instantiation; only a zero delta succeeds.
                    let delta = top(&mut stack);
                    *delta = if *delta as u32 == 0 {
                        memory.pages() as u64
                    } else {
                        u32::MAX as u64
                    };
                }
                Instr::MemoryFill => {
                    c.stores += 1;
                    let n = pop(&mut stack) as u32 as usize;
                    let val = pop(&mut stack) as u8;
                    let dst = pop(&mut stack) as u32 as usize;
                    let bytes = memory.bytes_mut();
                    if dst + n > bytes.len() {
                        return Err(Trap::MemoryOutOfBounds);
                    }
                    bytes[dst..dst + n].fill(val);
                }
                Instr::MemoryCopy => {
                    c.loads += 1;
                    c.stores += 1;
                    let n = pop(&mut stack) as u32 as usize;
                    let src = pop(&mut stack) as u32 as usize;
                    let dst = pop(&mut stack) as u32 as usize;
                    let bytes = memory.bytes_mut();
                    if src + n > bytes.len() || dst + n > bytes.len() {
                        return Err(Trap::MemoryOutOfBounds);
                    }
                    bytes.copy_within(src..src + n, dst);
                }
                Instr::Const(v) => stack.push(v),
                Instr::Eqz32 => {
                    let t = top(&mut stack);
                    *t = (*t as u32 == 0) as u64;
                }
                Instr::Eqz64 => {
                    let t = top(&mut stack);
                    *t = (*t == 0) as u64;
                }
                Instr::Cmp32(op) => {
                    let b = pop(&mut stack) as u32;
                    let t = top(&mut stack);
                    *t = cmp32(op, *t as u32, b) as u64;
                }
                Instr::Cmp64(op) => {
                    let b = pop(&mut stack);
                    let t = top(&mut stack);
                    *t = cmp64(op, *t, b) as u64;
                }
                Instr::Bin32(op) => {
                    let b = pop(&mut stack) as u32;
                    let t = top(&mut stack);
                    *t = bin32(op, *t as u32, b)? as u64;
                }
                Instr::Bin64(op) => {
                    let b = pop(&mut stack);
                    let t = top(&mut stack);
                    *t = bin64(op, *t, b)?;
                }
                Instr::Un32(op) => {
                    let t = top(&mut stack);
                    let v = *t as u32;
                    *t = match op {
                        Un::Clz => v.leading_zeros(),
                        Un::Ctz => v.trailing_zeros(),
                        Un::Popcnt => v.count_ones(),
                    } as u64;
                }
                Instr::Un64(op) => {
                    let t = top(&mut stack);
                    *t = match op {
                        Un::Clz => t.leading_zeros(),
                        Un::Ctz => t.trailing_zeros(),
                        Un::Popcnt => t.count_ones(),
                    } as u64;
                }
                Instr::Wrap => {
                    let t = top(&mut stack);
                    *t = *t as u32 as u64;
                }
                Instr::ExtendS => {
                    let t = top(&mut stack);
                    *t = *t as u32 as i32 as i64 as u64;
                }
                Instr::ExtendU => {
                    let t = top(&mut stack);
                    *t = *t as u32 as u64;
                }
                Instr::Ext32From8 => {
                    let t = top(&mut stack);
                    *t = *t as u8 as i8 as i32 as u32 as u64;
                }
                Instr::Ext32From16 => {
                    let t = top(&mut stack);
                    *t = *t as u16 as i16 as i32 as u32 as u64;
                }
                Instr::Ext64From8 => {
                    let t = top(&mut stack);
                    *t = *t as u8 as i8 as i64 as u64;
                }
                Instr::Ext64From16 => {
                    let t = top(&mut stack);
                    *t = *t as u16 as i16 as i64 as u64;
                }
                Instr::Ext64From32 => {
                    let t = top(&mut stack);
                    *t = *t as u32 as i32 as i64 as u64;
                }
            }
        }
    }
}
