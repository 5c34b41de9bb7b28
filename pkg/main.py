from commands import cli


def main():
    cli(prog_name='myosynth')


if __name__ == '__main__':
    main()
