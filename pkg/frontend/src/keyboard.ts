/**
 * Keyboard bindings for the review loop: space plays/pauses, the arrow
 * keys step slices, 1-5 pick a category, U toggles ungradable, Enter
 * submits. Returns an unbind function.
 */

export interface KeyHandlers {
  togglePlay(): void;
  step(delta: number): void;
  selectCategory(slot: number): void;
  toggleUngradable(): void;
  submit(): void;
}

type KeyTarget = Pick<Document, "addEventListener" | "removeEventListener">;

export function bindKeys(target: KeyTarget, handlers: KeyHandlers): () => void {
  const onKeyDown = (event: Event): void => {
    const key = (event as KeyboardEvent).key;
    let caught = true;
    switch (key) {
      case " ":
        handlers.togglePlay();
        break;
      case "ArrowLeft":
        handlers.step(-1);
        break;
      case "ArrowRight":
        handlers.step(1);
        break;
      case "1":
      case "2":
      case "3":
      case "4":
      case "5":
        handlers.selectCategory(Number(key));
        break;
      case "u":
      case "U":
        handlers.toggleUngradable();
        break;
      case "Enter":
        handlers.submit();
        break;
      default:
        caught = false;
    }
    if (caught) {
      event.preventDefault();
    }
  };
  target.addEventListener("keydown", onKeyDown);
  return () => target.removeEventListener("keydown", onKeyDown);
}
