export interface Debounced {
  trigger(): void;
  cancel(): void;
}

/** Collapse bursts of triggers into one call of fn, ms after the last one. */
export function debounce(ms: number, fn: () => void): Debounced {
  let timer: ReturnType<typeof setTimeout> | null = null;

  return {
    trigger() {
      if (timer) clearTimeout(timer);
      timer = setTimeout(() => {
        timer = null;
        fn();
      }, ms);
    },
    cancel() {
      if (timer) clearTimeout(timer);
      timer = null;
    },
  };
}
