/* tslint:disable */
/* eslint-disable */

/**
 * Smoothed sentence BLEU between two whitespace-tokenized strings.
 */
export function bleu(hyp: string, reference: string): number;

/**
 * Greedy and prefix-beam CTC decoding of a probability table. Returns
 * `{"greedy": [...], "beam": [{"labels", "score"}, ...]}` as JSON.
 */
export function ctc_search(table: string, labels: number, beam: number): string;

/**
 * Number of tokens re-masked after each iteration `t = 1..=T`.
 */
export function schedule(n: number, iterations: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bleu: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly ctc_search: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly schedule: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
