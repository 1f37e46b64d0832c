// Keyboard-first controls: space flips between the two reconstructions,
// 1/2 picks the one that looks closer to the original.

export interface KeyActions {
  flip: () => void
  choose1: () => void
  choose2: () => void
}

export function keyHandler(actions: KeyActions): (e: KeyboardEvent) => void {
  return (e: KeyboardEvent) => {
    if (e.key === ' ' || e.code === 'Space') {
      e.preventDefault()
      actions.flip()
    } else if (e.key === '1') {
      actions.choose1()
    } else if (e.key === '2') {
      actions.choose2()
    }
  }
}

export function bindKeys(target: Pick<Window, 'addEventListener'>, actions: KeyActions): void {
  target.addEventListener('keydown', keyHandler(actions) as EventListener)
}
