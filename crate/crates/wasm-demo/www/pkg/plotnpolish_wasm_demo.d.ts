/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    caption(page: number): string;
    /**
     * Returns the edit summary as JSON.
     */
    editCharacter(concept: string, prompt: string, pages: Uint32Array): string;
    editStyle(prompt: string): string;
    frame(page: number): Uint8Array;
    /**
     * Grid membership at step `t`, as JSON `[[page, ...], ...]`.
     */
    groupsAt(t: number): string;
    constructor(resolution: number, steps: number, seed: number, rows: number, cols: number);
    undo(): void;
    readonly head: number;
    readonly pages: number;
    readonly size: number;
    readonly steps: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_caption: (a: number, b: number) => [number, number];
    readonly demo_editCharacter: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly demo_editStyle: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_frame: (a: number, b: number) => [number, number, number, number];
    readonly demo_groupsAt: (a: number, b: number) => [number, number];
    readonly demo_head: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly demo_pages: (a: number) => number;
    readonly demo_size: (a: number) => number;
    readonly demo_steps: (a: number) => number;
    readonly demo_undo: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
